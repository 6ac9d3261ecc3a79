use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use nppr_core::experiment::{self, Manifest};
use nppr_core::metrics::format_percent;
use nppr_core::{parse_config, ExperimentConfig, RobustnessReport, Verdict};

/// Learn worst-case perturbation laws and report probabilistic robustness.
#[derive(Parser)]
#[command(name = "nppr", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to `output_dir`, then `$NPPR_OUT_ROOT/<config stem>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Treat warnings (classifier below threshold, divergence) as failures.
    #[arg(long)]
    strict: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a generator, evaluate it and verify the orderings.
    Train(Common),
    /// Re-evaluate the generator saved in a run directory.
    Evaluate(Common),
    /// Run every point of the `[sweep]` grid.
    Sweep(Common),
    /// Check the orderings across saved report files.
    Verify {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Where to write the verdict JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write exact perturbation draws for the test split.
    ExportSamples {
        #[command(flatten)]
        common: Common,
        /// Draws per test input.
        #[arg(long, default_value_t = 16)]
        per_input: usize,
    },
}

const OUT_ROOT_ENV: &str = "NPPR_OUT_ROOT";
const VERIFY_FAILED: u8 = 2;
const STRICT_FAILED: u8 = 3;

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let text = fs::read_to_string(&common.config).with_context(|| format!("reading {}", common.config.display()))?;
    let mut cfg = parse_config(&text).with_context(|| format!("parsing {}", common.config.display()))?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    let out = match (&common.out, &cfg.output_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => o.clone(),
        (None, None) => {
            let stem = common.config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or("run".into());
            let root = std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
            root.join(stem)
        }
    };
    Ok((cfg, out))
}

fn print_report(r: &RobustnessReport) {
    println!("mode {}  K={}  gamma={}", r.mode, r.modes, r.key.gamma);
    for (name, e) in r.probabilities() {
        println!("  {name:<14} {:>7}%  ± {}", format_percent(e.value), format_percent(e.half_width()));
    }
    if let Some(er) = r.entropy_ratio {
        println!("  entropy ratio  {er:.4}  (pi max {:.4}, min {:.4})", r.pi_max, r.pi_min);
    }
}

fn print_verdict(v: &Verdict) {
    for q in &v.inequalities {
        let tag = if q.pass { "ok  " } else { "FAIL" };
        println!("  [{tag}] {}: {:.4} <= {:.4} (± {:.4})", q.name, q.lhs, q.rhs, q.half_width);
    }
    println!("verdict: {}", if v.pass { "pass" } else { "fail" });
}

fn strict_check(strict: bool, warnings: &[String]) -> Option<ExitCode> {
    for w in warnings {
        warn!("{w}");
    }
    (strict && !warnings.is_empty()).then_some(ExitCode::from(STRICT_FAILED))
}

fn verdict_code(pass: bool) -> ExitCode {
    if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(VERIFY_FAILED)
    }
}

fn train(common: &Common) -> Result<ExitCode> {
    let (cfg, out) = load(common)?;
    info!("writing run to {}", out.display());
    let o = experiment::run_experiment(&cfg, &out).with_context(|| failed_stage(&out))?;
    print_report(&o.report);
    print_verdict(&o.verdict);
    if let Some(code) = strict_check(common.strict, o.warnings()) {
        return Ok(code);
    }
    Ok(verdict_code(o.verdict.pass))
}

fn failed_stage(out: &Path) -> String {
    let stage = fs::read_to_string(out.join(experiment::MANIFEST_JSON))
        .ok()
        .and_then(|t| serde_json::from_str::<Manifest>(&t).ok())
        .and_then(|m| m.failed_stage);
    match stage {
        Some(s) => format!("stage `{s}` failed; see {}", out.display()),
        None => format!("run in {} failed", out.display()),
    }
}

fn evaluate(common: &Common) -> Result<ExitCode> {
    let (cfg, out) = load(common)?;
    if !out.join(experiment::CHECKPOINT_JSON).exists() {
        bail!("{} has no trained generator; run `nppr train` first", out.display());
    }
    let report = experiment::evaluate_saved(&cfg, &out)?;
    fs::write(out.join(experiment::REPORT_JSON), serde_json::to_string_pretty(&report)?)?;
    let verdict = nppr_core::verify_propositions(std::slice::from_ref(&report))?;
    fs::write(out.join(experiment::VERDICT_JSON), serde_json::to_string_pretty(&verdict)?)?;
    print_report(&report);
    print_verdict(&verdict);
    Ok(verdict_code(verdict.pass))
}

fn sweep(common: &Common) -> Result<ExitCode> {
    let (cfg, out) = load(common)?;
    let s = experiment::run_sweep(&cfg, &out)?;
    let mut warnings = Vec::new();
    for (name, r) in &s.runs {
        match r {
            Ok(o) => {
                println!("{name}:");
                print_report(&o.report);
                warnings.extend(o.warnings().iter().map(|w| format!("{name}: {w}")));
            }
            Err(e) => println!("{name}: failed: {e}"),
        }
    }
    for v in &s.verdicts {
        print_verdict(v);
    }
    if let Some(code) = strict_check(common.strict, &warnings) {
        return Ok(code);
    }
    Ok(verdict_code(s.pass()))
}

fn verify(reports: &[PathBuf], out: Option<&Path>) -> Result<ExitCode> {
    let v = experiment::verify_files(reports)?;
    if let Some(p) = out {
        fs::write(p, serde_json::to_string_pretty(&v)?)?;
    }
    print_verdict(&v);
    Ok(verdict_code(v.pass))
}

fn export(common: &Common, per_input: usize) -> Result<ExitCode> {
    let (cfg, out) = load(common)?;
    let path = experiment::export_saved(&cfg, &out, per_input)?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Train(c) => train(c),
        Cmd::Evaluate(c) => evaluate(c),
        Cmd::Sweep(c) => sweep(c),
        Cmd::Verify { reports, out } => verify(reports, out.as_deref()),
        Cmd::ExportSamples { common, per_input } => export(common, *per_input),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
