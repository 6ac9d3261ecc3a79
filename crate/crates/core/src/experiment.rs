//! End-to-end runs: data → classifier → generator → report → verdict.

use std::fs;
use std::path::{Path, PathBuf};

use nppr_tensor::snapshot::{load_params, save_params};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{make_split, Dataset};
use crate::error::{NpprError, Result};
use crate::generator::Generator;
use crate::metrics::{summarize, EstimatorRegistry, EvalContext, ExperimentKey, RobustnessReport};
use crate::models::{train_classifier, Classifier};
use crate::oracle::{verify_propositions, Verdict};
use crate::rng::{derive_seed, substream, Stream};
use crate::trainer::{write_epoch_csv, Checkpoint, EpochRecord, Trainer};

pub const EPOCHS_CSV: &str = "epochs.csv";
pub const REPORT_JSON: &str = "report.json";
pub const VERDICT_JSON: &str = "verdict.json";
pub const SAMPLES_CSV: &str = "samples.csv";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const CHECKPOINT_JSON: &str = "checkpoint.json";
pub const CLASSIFIER_JSON: &str = "classifier.json";
pub const CONFIG_TOML: &str = "config.toml";

/// Datasets and the frozen classifier shared by every run on one config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub classifier: Classifier,
    pub train_accuracy: f64,
    pub warnings: Vec<String>,
}

/// Builds the split and trains (or loads) the classifier.
pub fn prepare(cfg: &ExperimentConfig, classifier_path: Option<&Path>) -> Result<Prepared> {
    let (train, test) = make_split(&cfg.dataset)?;
    let mut warnings = Vec::new();
    let classifier = match classifier_path.filter(|p| p.exists()) {
        Some(p) => Classifier::from_params(load_params(p)?, cfg.dataset.input_kind())?,
        None => {
            let t = train_classifier(&train, &cfg.classifier)?;
            if !t.reached_threshold {
                warnings.push(format!(
                    "classifier train accuracy {:.4} is below the threshold {}",
                    t.train_accuracy, cfg.classifier.accuracy_threshold
                ));
            }
            t.classifier
        }
    };
    let train_accuracy = classifier.accuracy(&train)?;
    Ok(Prepared {
        train,
        test,
        classifier,
        train_accuracy,
        warnings,
    })
}

pub fn build_generator(cfg: &ExperimentConfig, clf: &Classifier) -> Result<Generator> {
    let temps = cfg.train.temperatures(0)?;
    Generator::new(&cfg.gmm, &cfg.upsampler_spec(), cfg.gamma(), clf, temps, cfg.train.seed)
}

/// Stable hex digest of classifier weights.
pub fn classifier_digest(clf: &Classifier) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: &[u8]| {
        for &x in b {
            h ^= x as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for (name, t) in clf.params().iter() {
        eat(name.as_bytes());
        for v in t.data() {
            eat(&v.to_bits().to_le_bytes());
        }
    }
    format!("{h:016x}")
}

pub fn experiment_key(cfg: &ExperimentConfig, clf: &Classifier) -> Result<ExperimentKey> {
    Ok(ExperimentKey {
        dataset: serde_json::to_string(&cfg.dataset)?,
        classifier: classifier_digest(clf),
        gamma: cfg.upsampler.epsilon.to_string(),
    })
}

/// Final metrics of a trained generator on both splits.
pub fn evaluate(cfg: &ExperimentConfig, prep: &Prepared, gen: &Generator) -> Result<RobustnessReport> {
    let reg = EstimatorRegistry::default();
    fn ctx<'a>(
        cfg: &'a ExperimentConfig,
        prep: &'a Prepared,
        gen: &'a Generator,
        ds: &'a Dataset,
        stream_index: u64,
    ) -> EvalContext<'a> {
        let b = &cfg.baselines;
        EvalContext {
        classifier: &prep.classifier,
        dataset: ds,
        gamma: cfg.gamma(),
        generator: Some(gen),
        samples: b.eval_samples,
        seed: derive_seed(cfg.train.seed, Stream::Eval, stream_index),
        pgd_steps: b.pgd_steps,
        cw_steps: b.cw_steps,
        kappa: cfg.train.kappa,
        sigma_divisor: b.gaussian_sigma_rule.divisor,
        }
    }
    let test = ctx(cfg, prep, gen, &prep.test, 0);
    let train = ctx(cfg, prep, gen, &prep.train, 1);
    let mix = gen.mixture(&prep.classifier, &prep.test.inputs, &prep.test.labels)?;
    let weights: Vec<Vec<f64>> = (0..mix.batch()).map(|i| mix.probs(i)).collect();
    let summary = summarize(&weights)?;
    let mut report = RobustnessReport {
        key: experiment_key(cfg, &prep.classifier)?,
        mode: gen.mode(),
        modes: cfg.gmm.k,
        gamma: cfg.gamma(),
        nppr_test: reg.run("nppr", &test)?,
        nppr_train: reg.run("nppr", &train)?,
        pr_gaussian: reg.run("pr-gaussian", &test)?,
        pr_uniform: reg.run("pr-uniform", &test)?,
        ar_pgd: reg.run("ar-pgd", &test)?,
        ar_cw: reg.run("ar-cw", &test)?,
        clean_accuracy: reg.run("clean", &test)?,
        entropy_ratio: summary.entropy_ratio,
        pi_max: summary.pi.max,
        pi_min: summary.pi.min,
        pi_std: summary.pi.std,
        percent: Default::default(),
    };
    report.fill_percent();
    Ok(report)
}

/// Writes `per_input` exact draws for every input as CSV rows
/// `input_id, sample_id, label, component_argmax, latent_0.., delta_0..`.
pub fn export_samples(gen: &Generator, clf: &Classifier, ds: &Dataset, per_input: usize, seed: u64, path: &Path) -> Result<()> {
    let mix = gen.mixture(clf, &ds.inputs, &ds.labels)?;
    let (l, d) = (mix.latent_dim(), ds.dim());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["input_id", "sample_id", "label", "component_argmax"].map(String::from).into();
    header.extend((0..l).map(|j| format!("latent_{j}")));
    header.extend((0..d).map(|j| format!("delta_{j}")));
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rng = substream(seed, Stream::Export, i as u64);
        let (latent, comps, _) = crate::gmm::sample_exact_row(&mix, i, per_input, &mut rng);
        let latent = nppr_tensor::Tensor::new([per_input, l], latent)?;
        let delta = gen.decode_values(&latent)?;
        for (j, z) in comps.iter().enumerate() {
            let mut rec = vec![i.to_string(), j.to_string(), ds.labels[i].to_string(), z.to_string()];
            rec.extend(latent.row(j).iter().map(|v| v.to_string()));
            rec.extend(delta.row(j).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Outcome summary written next to the artifacts of every run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: Vec<StageRecord>,
    pub failed_stage: Option<String>,
    pub warnings: Vec<String>,
    pub artifacts: Vec<String>,
    pub verified: Option<bool>,
}

impl Manifest {
    fn ok(&mut self, stage: &str) {
        self.stages.push(StageRecord {
            stage: stage.into(),
            ok: true,
            error: None,
        });
    }

    fn fail(&mut self, stage: &str, err: &NpprError) {
        self.stages.push(StageRecord {
            stage: stage.into(),
            ok: false,
            error: Some(err.to_string()),
        });
        self.failed_stage = Some(stage.into());
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub report: RobustnessReport,
    pub records: Vec<EpochRecord>,
    pub verdict: Verdict,
    pub manifest: Manifest,
    pub initial_nppr: f64,
    pub diverged: bool,
    pub nan_aborts: usize,
}

impl ExperimentOutcome {
    pub fn warnings(&self) -> &[String] {
        &self.manifest.warnings
    }
}

fn stage<T>(m: &mut Manifest, dir: &Path, name: &str, r: Result<T>) -> Result<T> {
    match r {
        Ok(v) => {
            m.ok(name);
            Ok(v)
        }
        Err(e) => {
            m.fail(name, &e);
            let _ = m.save(&dir.join(MANIFEST_JSON));
            Err(e)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

/// Trains, evaluates and verifies one configuration, writing artifacts to
/// `dir`. Partial artifacts and the manifest survive a failed stage.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentOutcome> {
    fs::create_dir_all(dir)?;
    let mut m = Manifest::default();
    fs::write(dir.join(CONFIG_TOML), cfg.to_toml()?)?;
    m.artifacts.push(CONFIG_TOML.into());
    let prep = stage(&mut m, dir, "prepare", prepare(cfg, None))?;
    m.warnings.extend(prep.warnings.iter().cloned());
    save_params(dir.join(CLASSIFIER_JSON), prep.classifier.params())?;
    m.artifacts.push(CLASSIFIER_JSON.into());

    let gen = stage(&mut m, dir, "build", build_generator(cfg, &prep.classifier))?;
    let trained = stage(
        &mut m,
        dir,
        "train",
        Trainer::new(&prep.classifier, &prep.train, gen, cfg.train.clone())
            .map(|t| t.with_checkpoint_path(dir.join(CHECKPOINT_JSON)))
            .and_then(|t| t.run()),
    )?;
    write_epoch_csv(dir.join(EPOCHS_CSV), &trained.records)?;
    m.artifacts.push(EPOCHS_CSV.into());
    if trained.diverged {
        m.warnings.push("training loss diverged".into());
    }
    if trained.nan_aborts > 0 {
        m.warnings.push(format!("{} epochs aborted on a non-finite loss", trained.nan_aborts));
    }
    let final_ckpt = Checkpoint {
        format_version: crate::trainer::CHECKPOINT_VERSION,
        mode: trained.generator.mode(),
        total_epochs: cfg.train.epochs,
        temps: trained.generator.temps,
        params: trained.generator.params().clone(),
        adam: Default::default(),
        progress: crate::trainer::Progress {
            next_epoch: cfg.train.epochs,
            records: trained.records.clone(),
            initial_nppr: trained.initial_nppr,
            initial_loss: None,
            high_loss_streak: 0,
            diverged: trained.diverged,
            nan_aborts: trained.nan_aborts,
            skipped_steps: trained.skipped_steps,
            best_nppr: trained.records.iter().map(|r| r.nppr_running).fold(trained.initial_nppr, f64::min),
        },
    };
    final_ckpt.save(dir.join(CHECKPOINT_JSON))?;
    m.artifacts.push(CHECKPOINT_JSON.into());

    let report = stage(&mut m, dir, "evaluate", evaluate(cfg, &prep, &trained.generator))?;
    write_json(&dir.join(REPORT_JSON), &report)?;
    m.artifacts.push(REPORT_JSON.into());

    if cfg.baselines.export_samples > 0 {
        let path = dir.join(SAMPLES_CSV);
        let seed = derive_seed(cfg.train.seed, Stream::Export, 0);
        stage(
            &mut m,
            dir,
            "export",
            export_samples(&trained.generator, &prep.classifier, &prep.test, cfg.baselines.export_samples, seed, &path),
        )?;
        m.artifacts.push(SAMPLES_CSV.into());
    }

    let verdict = stage(&mut m, dir, "verify", verify_propositions(std::slice::from_ref(&report)))?;
    write_json(&dir.join(VERDICT_JSON), &verdict)?;
    m.artifacts.push(VERDICT_JSON.into());
    m.verified = Some(verdict.pass);
    m.save(&dir.join(MANIFEST_JSON))?;
    Ok(ExperimentOutcome {
        report,
        records: trained.records,
        verdict,
        manifest: m,
        initial_nppr: trained.initial_nppr,
        diverged: trained.diverged,
        nan_aborts: trained.nan_aborts,
    })
}

/// Re-evaluates the generator saved in `dir` by [`run_experiment`].
pub fn evaluate_saved(cfg: &ExperimentConfig, dir: &Path) -> Result<RobustnessReport> {
    let prep = prepare(cfg, Some(&dir.join(CLASSIFIER_JSON)))?;
    let mut gen = build_generator(cfg, &prep.classifier)?;
    Checkpoint::load(dir.join(CHECKPOINT_JSON))?.apply_to(&mut gen)?;
    evaluate(cfg, &prep, &gen)
}

/// Writes `samples.csv` from the generator saved in `dir`.
pub fn export_saved(cfg: &ExperimentConfig, dir: &Path, per_input: usize) -> Result<PathBuf> {
    let prep = prepare(cfg, Some(&dir.join(CLASSIFIER_JSON)))?;
    let mut gen = build_generator(cfg, &prep.classifier)?;
    Checkpoint::load(dir.join(CHECKPOINT_JSON))?.apply_to(&mut gen)?;
    let path = dir.join(SAMPLES_CSV);
    let seed = derive_seed(cfg.train.seed, Stream::Export, 0);
    export_samples(&gen, &prep.classifier, &prep.test, per_input, seed, &path)?;
    Ok(path)
}

/// One expanded sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub name: String,
    pub config: ExperimentConfig,
}

/// Cartesian product over the sweep lists; each run gets a derived seed
/// unless seeds are listed explicitly.
pub fn expand_sweep(cfg: &ExperimentConfig) -> Vec<SweepRun> {
    let s = &cfg.sweep;
    let modes = if s.modes.is_empty() { vec![cfg.gmm.mode] } else { s.modes.clone() };
    let ks = if s.ks.is_empty() { vec![cfg.gmm.k] } else { s.ks.clone() };
    let eps = if s.epsilons.is_empty() {
        vec![cfg.upsampler.epsilon]
    } else {
        s.epsilons.clone()
    };
    let seeds: Vec<Option<u64>> = if s.seeds.is_empty() {
        vec![None]
    } else {
        s.seeds.iter().copied().map(Some).collect()
    };
    let mut out = Vec::new();
    for &seed in &seeds {
        for e in &eps {
            for &k in &ks {
                for &mode in &modes {
                    let mut c = cfg.clone();
                    c.sweep = Default::default();
                    c.gmm.mode = mode;
                    c.gmm.k = k;
                    c.upsampler.epsilon = *e;
                    let tag = e.to_string().replace('/', "_");
                    let mut name = format!("{}_k{k}_eps{tag}", mode.key());
                    c.train.seed = match seed {
                        Some(s) => {
                            name.push_str(&format!("_seed{s}"));
                            s
                        }
                        None => derive_seed(cfg.train.seed, Stream::Sweep, out.len() as u64),
                    };
                    out.push(SweepRun { name, config: c });
                }
            }
        }
    }
    out
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub runs: Vec<(String, Result<ExperimentOutcome>)>,
    /// Cross-run checks grouped by experiment key.
    pub verdicts: Vec<Verdict>,
}

impl SweepOutcome {
    pub fn pass(&self) -> bool {
        self.runs.iter().all(|(_, r)| r.as_ref().map(|o| o.verdict.pass).unwrap_or(false))
            && self.verdicts.iter().all(|v| v.pass)
    }
}

/// Runs every sweep point under `dir/<name>` and verifies each group of
/// reports sharing a classifier, dataset and radius.
pub fn run_sweep(cfg: &ExperimentConfig, dir: &Path) -> Result<SweepOutcome> {
    fs::create_dir_all(dir)?;
    let mut runs = Vec::new();
    for run in expand_sweep(cfg) {
        let out = run_experiment(&run.config, &dir.join(&run.name));
        if let Err(e) = &out {
            log::error!("sweep run {} failed: {e}", run.name);
        }
        runs.push((run.name, out));
    }
    let mut groups: Vec<Vec<RobustnessReport>> = Vec::new();
    for (_, r) in &runs {
        let Ok(o) = r else { continue };
        match groups.iter_mut().find(|g| g[0].key == o.report.key) {
            Some(g) => g.push(o.report.clone()),
            None => groups.push(vec![o.report.clone()]),
        }
    }
    let verdicts = groups
        .iter()
        .map(|g| verify_propositions(g))
        .collect::<Result<Vec<_>>>()?;
    write_json(&dir.join(VERDICT_JSON), &verdicts)?;
    Ok(SweepOutcome { runs, verdicts })
}

/// Loads report JSON files and checks the orderings across them.
pub fn verify_files(paths: &[PathBuf]) -> Result<Verdict> {
    let mut reports = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p)?;
        reports.push(serde_json::from_str::<RobustnessReport>(&text)?);
    }
    verify_propositions(&reports)
}
