//! Generator training loop, per-epoch records and checkpoints.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nppr_tensor::{adam_step, AdamConfig, AdamState, Graph, ParamSet, StepOutcome};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, NpprError, Result};
use crate::generator::Generator;
use crate::gmm::{AnnealSchedule, GumbelConfig, Noise, Temperatures};
use crate::metrics::{nppr_estimate, summarize};
use crate::models::{Classifier, DependencyMode};
use crate::rng::{derive_seed, substream, Stream};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Epochs of sustained high loss before a run is flagged as diverged.
const DIVERGENCE_EPOCHS: usize = 5;
const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Linear warmup to `lr`, then one cosine decay to `lr_min`.
    Cosine { warmup_epochs: usize, lr_min: f64 },
}

impl LrSchedule {
    pub fn at(&self, base: f64, epoch: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { warmup_epochs, lr_min } => {
                if epoch < warmup_epochs {
                    base * (epoch + 1) as f64 / warmup_epochs as f64
                } else {
                    let span = total.saturating_sub(warmup_epochs).max(1) as f64;
                    let t = (epoch - warmup_epochs) as f64 / span;
                    lr_min + 0.5 * (base - lr_min) * (1.0 + (PI * t).cos())
                }
            }
        }
    }
}

fn d_epochs() -> usize {
    50
}
fn d_lr() -> f64 {
    5e-4
}
fn d_schedule() -> LrSchedule {
    LrSchedule::Constant
}
fn d_m() -> usize {
    32
}
fn d_batch() -> usize {
    128
}
fn d_eval_every() -> usize {
    5
}
fn d_probe() -> usize {
    256
}
fn d_kappa() -> f64 {
    1.0
}

/// The `[train]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_schedule")]
    pub lr_schedule: LrSchedule,
    #[serde(default = "d_m")]
    pub samples_per_input: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub gumbel: GumbelConfig,
    #[serde(default)]
    pub anneal: AnnealSchedule,
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
    /// Held-out inputs used for the running estimate.
    #[serde(default = "d_probe")]
    pub probe_size: usize,
    #[serde(default = "d_m")]
    pub probe_samples: usize,
    #[serde(default = "d_kappa")]
    pub kappa: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: d_epochs(),
            lr: d_lr(),
            lr_schedule: d_schedule(),
            samples_per_input: d_m(),
            batch_size: d_batch(),
            seed: 0,
            gumbel: GumbelConfig::default(),
            anneal: AnnealSchedule::default(),
            eval_every: d_eval_every(),
            probe_size: d_probe(),
            probe_samples: d_m(),
            kappa: d_kappa(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: String| NpprError::Config {
            path: format!("train.{path}"),
            msg,
        };
        if self.epochs == 0 {
            return Err(bad("epochs", "must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(bad("lr", format!("must be positive, got {}", self.lr)));
        }
        if self.samples_per_input == 0 {
            return Err(bad("samples_per_input", "must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(bad("eval_every", "must be at least 1".into()));
        }
        if self.probe_size == 0 || self.probe_samples == 0 {
            return Err(bad("probe_size", "probe size and samples must be at least 1".into()));
        }
        if !self.kappa.is_finite() {
            return Err(bad("kappa", "must be finite".into()));
        }
        if let LrSchedule::Cosine { lr_min, .. } = self.lr_schedule {
            if !(lr_min >= 0.0 && lr_min <= self.lr) {
                return Err(bad("lr_schedule.lr_min", format!("must lie in [0, lr], got {lr_min}")));
            }
        }
        self.gumbel.validate().map_err(|e| bad("gumbel", e.to_string()))?;
        self.anneal.validate().map_err(|e| bad("anneal", e.to_string()))?;
        Ok(())
    }

    pub fn temperatures(&self, epoch: usize) -> Result<Temperatures> {
        Temperatures::at(&self.gumbel, &self.anneal, epoch, self.epochs)
    }
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// One row of the per-epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean relaxed margin loss; NaN when the epoch was aborted.
    #[serde(with = "nan_as_null")]
    pub train_loss: f64,
    pub nppr_running: f64,
    pub entropy_ratio: Option<f64>,
    pub pi_max: f64,
    pub pi_min: f64,
    pub pi_std: f64,
    pub tau_gumbel: f64,
    #[serde(rename = "T_pi")]
    pub t_pi: f64,
    #[serde(rename = "T_mu")]
    pub t_mu: f64,
    #[serde(rename = "T_sigma")]
    pub t_sigma: f64,
}

pub const EPOCH_CSV_HEADER: [&str; 11] = [
    "epoch",
    "train_loss",
    "nppr_running",
    "entropy_ratio",
    "pi_max",
    "pi_min",
    "pi_std",
    "tau_gumbel",
    "T_pi",
    "T_mu",
    "T_sigma",
];

pub fn write_epoch_csv(path: impl AsRef<Path>, records: &[EpochRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(EPOCH_CSV_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_epoch_csv(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(EPOCH_CSV_HEADER) {
        return Err(invalid("unexpected epoch CSV header"));
    }
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Run bookkeeping carried through checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    pub next_epoch: usize,
    pub records: Vec<EpochRecord>,
    /// Running estimate before the first update.
    pub initial_nppr: f64,
    pub initial_loss: Option<f64>,
    pub high_loss_streak: usize,
    pub diverged: bool,
    pub nan_aborts: usize,
    pub skipped_steps: usize,
    pub best_nppr: f64,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub mode: DependencyMode,
    pub total_epochs: usize,
    pub temps: Temperatures,
    pub params: ParamSet,
    pub adam: AdamState,
    pub progress: Progress,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format_version: Option<u32>,
        }
        let h: Header = serde_json::from_str(text).map_err(|e| NpprError::Checkpoint(format!("corrupt file: {e}")))?;
        match h.format_version {
            Some(CHECKPOINT_VERSION) => {}
            Some(v) => {
                return Err(NpprError::Checkpoint(format!(
                    "format_version {v} is not supported (expected {CHECKPOINT_VERSION})"
                )))
            }
            None => return Err(NpprError::Checkpoint("missing format_version".into())),
        }
        serde_json::from_str(text).map_err(|e| NpprError::Checkpoint(format!("corrupt file: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Loads parameters and temperatures into `gen`; the mode must match.
    pub fn apply_to(&self, gen: &mut Generator) -> Result<()> {
        if self.mode != gen.mode() {
            return Err(NpprError::Checkpoint(format!(
                "checkpoint is for {} mode, generator is {}",
                self.mode,
                gen.mode()
            )));
        }
        gen.set_params(self.params.clone())
            .map_err(|e| NpprError::Checkpoint(e.to_string()))?;
        gen.temps = self.temps;
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub generator: Generator,
    pub records: Vec<EpochRecord>,
    pub initial_nppr: f64,
    pub diverged: bool,
    pub nan_aborts: usize,
    pub skipped_steps: usize,
}

/// Stateful training run over a frozen classifier.
pub struct Trainer<'a> {
    clf: &'a Classifier,
    train: &'a Dataset,
    cfg: TrainConfig,
    gen: Generator,
    adam: AdamState,
    progress: Progress,
    probe: Dataset,
    last_good: (ParamSet, AdamState),
    checkpoint_path: Option<PathBuf>,
}

fn probe_subset(train: &Dataset, cfg: &TrainConfig) -> Dataset {
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut substream(cfg.seed, Stream::Probe, 0));
    idx.truncate(cfg.probe_size);
    idx.sort_unstable();
    train.subset(&idx)
}

impl<'a> Trainer<'a> {
    pub fn new(clf: &'a Classifier, train: &'a Dataset, mut gen: Generator, cfg: TrainConfig) -> Result<Self> {
        Self::check(clf, train, &cfg)?;
        gen.temps = cfg.temperatures(0)?;
        let probe = probe_subset(train, &cfg);
        let initial = nppr_estimate(clf, &gen, &probe, cfg.probe_samples, derive_seed(cfg.seed, Stream::Probe, 0))?;
        let progress = Progress {
            next_epoch: 0,
            records: Vec::new(),
            initial_nppr: initial.value,
            initial_loss: None,
            high_loss_streak: 0,
            diverged: false,
            nan_aborts: 0,
            skipped_steps: 0,
            best_nppr: initial.value,
        };
        let last_good = (gen.params().clone(), AdamState::default());
        Ok(Self {
            clf,
            train,
            cfg,
            gen,
            adam: AdamState::default(),
            progress,
            probe,
            last_good,
            checkpoint_path: None,
        })
    }

    /// Continues a run from `ckpt`; `gen` must have been built from the same config.
    pub fn resume(clf: &'a Classifier, train: &'a Dataset, mut gen: Generator, cfg: TrainConfig, ckpt: Checkpoint) -> Result<Self> {
        Self::check(clf, train, &cfg)?;
        if ckpt.total_epochs != cfg.epochs {
            return Err(NpprError::Checkpoint(format!(
                "checkpoint run has {} epochs, config has {}",
                ckpt.total_epochs, cfg.epochs
            )));
        }
        ckpt.apply_to(&mut gen)?;
        let probe = probe_subset(train, &cfg);
        let last_good = (gen.params().clone(), ckpt.adam.clone());
        Ok(Self {
            clf,
            train,
            cfg,
            gen,
            adam: ckpt.adam,
            progress: ckpt.progress,
            probe,
            last_good,
            checkpoint_path: None,
        })
    }

    fn check(clf: &Classifier, train: &Dataset, cfg: &TrainConfig) -> Result<()> {
        cfg.validate()?;
        if !clf.is_frozen() {
            return Err(invalid("generator training needs a frozen classifier"));
        }
        if train.is_empty() {
            return Err(NpprError::EmptyDataset);
        }
        Ok(())
    }

    /// Also writes a checkpoint file on the evaluation cadence and on new bests.
    pub fn with_checkpoint_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.checkpoint_path = Some(path.into());
        self
    }

    pub fn generator(&self) -> &Generator {
        &self.gen
    }

    pub fn progress(&self) -> &Progress {
        &self.progress
    }

    pub fn is_done(&self) -> bool {
        self.progress.next_epoch >= self.cfg.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            mode: self.gen.mode(),
            total_epochs: self.cfg.epochs,
            temps: self.gen.temps,
            params: self.gen.params().clone(),
            adam: self.adam.clone(),
            progress: self.progress.clone(),
        }
    }

    /// Mean relaxed loss over one pass, or `None` if a loss went non-finite.
    fn train_pass(&mut self, epoch: usize) -> Result<Option<f64>> {
        let cfg = &self.cfg;
        let m = cfg.samples_per_input;
        let (k, l) = (self.gen.head_config().k, self.gen.head_config().latent_dim);
        let adam_cfg = AdamConfig {
            lr: cfg.lr_schedule.at(cfg.lr, epoch, cfg.epochs),
            ..AdamConfig::default()
        };
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut substream(cfg.seed, Stream::EpochShuffle, epoch as u64));
        let mut noise_rng = substream(cfg.seed, Stream::TrainNoise, epoch as u64);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = self.train.batch(idx);
            let b = idx.len();
            let mut g = Graph::new();
            let p = self.gen.bind(&mut g);
            let noise = Noise::draw(&mut noise_rng, b * m, k, l);
            let loss = self.gen.margin_objective(&mut g, &p, self.clf, &x, &y, m, cfg.kappa, noise)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Ok(None);
            }
            g.backward(loss)?;
            let grads = self.gen.params().collect_grads(&g, &p);
            if adam_step(self.gen.params_mut(), &grads, &mut self.adam, &adam_cfg) == StepOutcome::SkippedNonFinite {
                self.progress.skipped_steps += 1;
            }
            total += lv * b as f64;
        }
        Ok(Some(total / self.train.len() as f64))
    }

    /// Trains one epoch and appends its record.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let epoch = self.progress.next_epoch;
        if epoch >= self.cfg.epochs {
            return Err(invalid("training already finished"));
        }
        self.gen.temps = self.cfg.temperatures(epoch)?;
        let loss = match self.train_pass(epoch)? {
            Some(l) => l,
            None => {
                log::warn!("epoch {epoch}: non-finite loss, restoring last checkpoint");
                self.gen.set_params(self.last_good.0.clone())?;
                self.adam = self.last_good.1.clone();
                self.progress.nan_aborts += 1;
                f64::NAN
            }
        };
        if loss.is_finite() {
            let init = *self.progress.initial_loss.get_or_insert(loss);
            if loss > DIVERGENCE_FACTOR * init {
                self.progress.high_loss_streak += 1;
            } else {
                self.progress.high_loss_streak = 0;
            }
            if self.progress.high_loss_streak >= DIVERGENCE_EPOCHS && !self.progress.diverged {
                log::warn!("epoch {epoch}: loss above {DIVERGENCE_FACTOR}x its initial value for {DIVERGENCE_EPOCHS} epochs");
                self.progress.diverged = true;
            }
        }
        let probe_seed = derive_seed(self.cfg.seed, Stream::Probe, epoch as u64 + 1);
        let running = nppr_estimate(self.clf, &self.gen, &self.probe, self.cfg.probe_samples, probe_seed)?;
        let mix = self.gen.mixture(self.clf, &self.probe.inputs, &self.probe.labels)?;
        let weights: Vec<Vec<f64>> = (0..mix.batch()).map(|b| mix.probs(b)).collect();
        let summary = summarize(&weights)?;
        let t = self.gen.temps;
        self.progress.records.push(EpochRecord {
            epoch,
            train_loss: loss,
            nppr_running: running.value,
            entropy_ratio: summary.entropy_ratio,
            pi_max: summary.pi.max,
            pi_min: summary.pi.min,
            pi_std: summary.pi.std,
            tau_gumbel: t.tau,
            t_pi: t.t_pi,
            t_mu: t.t_mu,
            t_sigma: t.t_sigma,
        });
        self.progress.next_epoch = epoch + 1;
        let improved = running.value < self.progress.best_nppr;
        if improved {
            self.progress.best_nppr = running.value;
        }
        if improved || (epoch + 1).is_multiple_of(self.cfg.eval_every) {
            self.last_good = (self.gen.params().clone(), self.adam.clone());
            if let Some(path) = &self.checkpoint_path {
                self.checkpoint().save(path)?;
            }
        }
        Ok(self.progress.records.last().expect("just pushed"))
    }

    /// Trains until `next_epoch == end` (or the run finishes).
    pub fn run_until(&mut self, end: usize) -> Result<()> {
        while self.progress.next_epoch < end.min(self.cfg.epochs) {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        self.run_until(self.cfg.epochs)?;
        Ok(self.finish())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            generator: self.gen,
            records: self.progress.records,
            initial_nppr: self.progress.initial_nppr,
            diverged: self.progress.diverged,
            nan_aborts: self.progress.nan_aborts,
            skipped_steps: self.progress.skipped_steps,
        }
    }
}

/// Trains `gen` against the frozen `clf` for the configured number of epochs.
pub fn train_generator(clf: &Classifier, train: &Dataset, gen: Generator, cfg: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(clf, train, gen, cfg.clone())?.run()
}
