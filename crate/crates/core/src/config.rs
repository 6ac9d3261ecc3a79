//! Experiment configuration documents (TOML).

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{DatasetSpec, InputKind};
use crate::error::{NpprError, Result};
use crate::models::{ClassifierSpec, DependencyMode, HeadConfig};
use crate::trainer::TrainConfig;
use crate::upsample::{Radius, UpsamplerKind, UpsamplerSpec};

fn d_kind() -> UpsamplerKind {
    UpsamplerKind::Linear
}
fn d_epsilon() -> Radius {
    Radius::ratio(8.0, 255.0)
}

/// The `[upsampler]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpsamplerConfig {
    #[serde(default = "d_kind")]
    pub kind: UpsamplerKind,
    #[serde(default)]
    pub learnable: bool,
    /// `(c, h', w')` latent image for bicubic mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_grid: Option<[usize; 3]>,
    /// L∞ budget radius γ.
    #[serde(default = "d_epsilon")]
    pub epsilon: Radius,
}

impl Default for UpsamplerConfig {
    fn default() -> Self {
        Self {
            kind: d_kind(),
            learnable: false,
            latent_grid: None,
            epsilon: d_epsilon(),
        }
    }
}

/// `σ = γ / divisor`, written `"gamma/3"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaRule {
    pub divisor: f64,
}

impl Default for SigmaRule {
    fn default() -> Self {
        Self { divisor: 3.0 }
    }
}

impl SigmaRule {
    pub fn sigma(&self, gamma: f64) -> f64 {
        gamma / self.divisor
    }
}

impl fmt::Display for SigmaRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gamma/{}", self.divisor)
    }
}

impl std::str::FromStr for SigmaRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let rest = s
            .trim()
            .strip_prefix("gamma/")
            .ok_or_else(|| format!("expected `gamma/<divisor>`, got `{s}`"))?;
        let divisor: f64 = rest.trim().parse().map_err(|_| format!("bad divisor in `{s}`"))?;
        if !(divisor > 0.0) || !divisor.is_finite() {
            return Err(format!("divisor must be positive in `{s}`"));
        }
        Ok(Self { divisor })
    }
}

impl Serialize for SigmaRule {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SigmaRule {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

fn d_steps() -> usize {
    20
}
fn d_eval_samples() -> usize {
    32
}

/// The `[baselines]` section, also governing final evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    #[serde(default = "d_steps")]
    pub pgd_steps: usize,
    #[serde(default = "d_steps")]
    pub cw_steps: usize,
    #[serde(default)]
    pub gaussian_sigma_rule: SigmaRule,
    /// Monte-Carlo draws per input for NPPR and PR.
    #[serde(default = "d_eval_samples")]
    pub eval_samples: usize,
    /// Perturbations per test input written to `samples.csv`; 0 disables.
    #[serde(default)]
    pub export_samples: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            pgd_steps: d_steps(),
            cw_steps: d_steps(),
            gaussian_sigma_rule: SigmaRule::default(),
            eval_samples: d_eval_samples(),
            export_samples: 0,
        }
    }
}

/// The `[sweep]` section; empty lists keep the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub modes: Vec<DependencyMode>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ks: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epsilons: Vec<Radius>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
}

impl SweepConfig {
    pub fn is_empty(&self) -> bool {
        self.modes.is_empty() && self.ks.is_empty() && self.epsilons.is_empty() && self.seeds.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub classifier: ClassifierSpec,
    #[serde(default)]
    pub gmm: HeadConfig,
    #[serde(default)]
    pub upsampler: UpsamplerConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub baselines: BaselineConfig,
    #[serde(default, skip_serializing_if = "SweepConfig::is_empty")]
    pub sweep: SweepConfig,
}

fn cfg_err(path: impl Into<String>, msg: impl Into<String>) -> NpprError {
    NpprError::Config {
        path: path.into(),
        msg: msg.into(),
    }
}

/// Parses and validates a TOML document; errors carry the offending key path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| cfg_err("<document>", e.to_string()))?;
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        cfg_err(if path == "." { "<document>".into() } else { path }, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// A blobs experiment with every other section at its default.
    pub fn with_dataset(dataset: DatasetSpec) -> Self {
        Self {
            output_dir: None,
            dataset,
            classifier: ClassifierSpec::default(),
            gmm: HeadConfig::default(),
            upsampler: UpsamplerConfig::default(),
            train: TrainConfig::default(),
            baselines: BaselineConfig::default(),
            sweep: SweepConfig::default(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| cfg_err("<document>", e.to_string()))
    }

    pub fn gamma(&self) -> f64 {
        self.upsampler.epsilon.value()
    }

    pub fn upsampler_spec(&self) -> UpsamplerSpec {
        UpsamplerSpec {
            kind: self.upsampler.kind,
            learnable: self.upsampler.learnable,
            latent_dim: self.gmm.latent_dim,
            latent_grid: self.upsampler.latent_grid,
            target: self.dataset.input_kind(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.gmm.validate()?;
        self.train.validate()?;
        let c = &self.classifier;
        if c.batch_size == 0 || !(c.lr > 0.0) {
            return Err(cfg_err("classifier", "batch_size and lr must be positive"));
        }
        if self.dataset.classes < 2 {
            return Err(cfg_err("dataset.classes", "the margin objective needs at least 2 classes"));
        }
        let g = self.upsampler.epsilon;
        if !(g.value() > 0.0) || !g.value().is_finite() {
            return Err(cfg_err("upsampler.epsilon", format!("must be positive, got {g}")));
        }
        let target = self.dataset.input_kind();
        let l = self.gmm.latent_dim;
        match self.upsampler.kind {
            UpsamplerKind::Bicubic => {
                let InputKind::Image { channels, height, width } = target else {
                    return Err(cfg_err("upsampler.kind", "bicubic needs a grid-image dataset"));
                };
                let Some([gc, gh, gw]) = self.upsampler.latent_grid else {
                    return Err(cfg_err("upsampler.latent_grid", "required for bicubic mode"));
                };
                if gc != channels || gh == 0 || gw == 0 || gh > height || gw > width {
                    return Err(cfg_err(
                        "upsampler.latent_grid",
                        format!("({gc}, {gh}, {gw}) does not fit image ({channels}, {height}, {width})"),
                    ));
                }
                if gc * gh * gw != l {
                    return Err(cfg_err("gmm.latent_dim", format!("must equal c·h'·w' = {}", gc * gh * gw)));
                }
            }
            UpsamplerKind::None if l != target.dim() => {
                return Err(cfg_err("gmm.latent_dim", format!("upsampler `none` needs latent_dim = {}", target.dim())));
            }
            _ => {}
        }
        if self.upsampler.latent_grid.is_some() && self.upsampler.kind != UpsamplerKind::Bicubic {
            return Err(cfg_err("upsampler.latent_grid", "only used by bicubic mode"));
        }
        let b = &self.baselines;
        if b.pgd_steps == 0 || b.cw_steps == 0 {
            return Err(cfg_err("baselines", "attack steps must be at least 1"));
        }
        if b.eval_samples == 0 {
            return Err(cfg_err("baselines.eval_samples", "must be at least 1"));
        }
        if self.sweep.ks.contains(&0) {
            return Err(cfg_err("sweep.ks", "mixture sizes must be at least 1"));
        }
        if self.sweep.epsilons.iter().any(|e| !(e.value() > 0.0)) {
            return Err(cfg_err("sweep.epsilons", "radii must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[dataset]
kind = "blobs"
"#;

    #[test]
    fn minimal_document_gets_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.gmm.k, 7);
        assert_eq!(cfg.train.samples_per_input, 32);
        assert_eq!(cfg.train.kappa, 1.0);
        assert_eq!(cfg.train.epochs, 50);
        assert_eq!(cfg.train.lr, 5e-4);
        assert_eq!(cfg.gamma(), 8.0 / 255.0);
    }

    #[test]
    fn fractional_epsilon_is_exact() {
        let cfg = parse_config(&format!("{MINIMAL}[upsampler]\nepsilon = \"16/255\"\n")).unwrap();
        assert_eq!(cfg.gamma(), 16.0 / 255.0);
    }

    #[test]
    fn zero_modes_names_key() {
        let err = parse_config(&format!("{MINIMAL}[gmm]\nmodes = 0\n")).unwrap_err();
        assert!(err.to_string().contains("gmm.modes"), "{err}");
    }

    #[test]
    fn unknown_key_rejected_with_path() {
        let err = parse_config(&format!("{MINIMAL}[train]\nepochz = 3\n")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train") && msg.contains("epochz"), "{msg}");
    }

    #[test]
    fn type_error_has_path() {
        let err = parse_config(&format!("{MINIMAL}[train]\nepochs = \"many\"\n")).unwrap_err();
        assert!(err.to_string().contains("train.epochs"), "{err}");
    }

    #[test]
    fn missing_dataset_rejected() {
        assert!(parse_config("[gmm]\nmodes = 3\n").is_err());
    }

    #[test]
    fn round_trip() {
        let doc = format!(
            "{MINIMAL}[gmm]\nmode = \"input\"\nmodes = 3\n[upsampler]\nepsilon = \"4/255\"\n[train]\nlr = 2e-2\n[train.lr_schedule]\nkind = \"cosine\"\nwarmup_epochs = 20\nlr_min = 0.0\n[sweep]\nks = [3, 7, 12]\nepsilons = [\"4/255\", 0.05]\n"
        );
        let a = parse_config(&doc).unwrap();
        let b = parse_config(&a.to_toml().unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sigma_rule_parses() {
        let r: SigmaRule = "gamma/4".parse().unwrap();
        assert_eq!(r.sigma(1.0), 0.25);
        assert!("sigma/3".parse::<SigmaRule>().is_err());
    }

    #[test]
    fn bicubic_needs_matching_grid() {
        let doc = "[dataset]\nkind = \"grid-image\"\nimage = [1, 8, 8]\n[gmm]\nlatent_dim = 16\n[upsampler]\nkind = \"bicubic\"\nlatent_grid = [1, 4, 4]\n";
        parse_config(doc).unwrap();
        let bad = doc.replace("latent_dim = 16", "latent_dim = 12");
        assert!(parse_config(&bad).unwrap_err().to_string().contains("gmm.latent_dim"));
    }
}
