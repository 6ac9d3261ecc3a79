//! Heads mapping labels and classifier features to mixture parameters.
//!
//! | mode          | `π` from          | `μ`, `L` from     |
//! |---------------|-------------------|-------------------|
//! | `independent` | free parameters   | free parameters   |
//! | `label`       | label embedding   | free parameters   |
//! | `input`       | feature trunk     | feature trunk     |
//! | `joint`       | label embedding   | feature trunk     |
//!
//! Temperatures divide pre-activations: `T_pi` the mixture logits, `T_mu` the
//! means, `T_sigma` the raw Cholesky entries, and `T_shared` the normalized
//! trunk activations.

use std::collections::BTreeMap;
use std::fmt;

use nppr_tensor::{Bound, Graph, ParamSet, Tensor, Var};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, NpprError, Result};
use crate::gmm::{chol_from_raw, raw_for_diag, GmmVars, Temperatures};
use crate::rng::Rng;

/// Diagonal of every Cholesky factor at initialization.
pub const INIT_CHOL_DIAG: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DependencyMode {
    Independent,
    #[serde(rename = "label")]
    LabelDep,
    #[serde(rename = "input")]
    InputDep,
    #[serde(rename = "joint")]
    JointDep,
}

impl DependencyMode {
    pub const ALL: [DependencyMode; 4] = [
        DependencyMode::Independent,
        DependencyMode::LabelDep,
        DependencyMode::InputDep,
        DependencyMode::JointDep,
    ];

    /// Config and registry name.
    pub fn key(&self) -> &'static str {
        match self {
            DependencyMode::Independent => "independent",
            DependencyMode::LabelDep => "label",
            DependencyMode::InputDep => "input",
            DependencyMode::JointDep => "joint",
        }
    }

    pub fn needs_labels(&self) -> bool {
        matches!(self, DependencyMode::LabelDep | DependencyMode::JointDep)
    }

    pub fn needs_features(&self) -> bool {
        matches!(self, DependencyMode::InputDep | DependencyMode::JointDep)
    }
}

impl fmt::Display for DependencyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DependencyMode::Independent => "Independent",
            DependencyMode::LabelDep => "LabelDep",
            DependencyMode::InputDep => "InputDep",
            DependencyMode::JointDep => "JointDep",
        })
    }
}

impl std::str::FromStr for DependencyMode {
    type Err = NpprError;

    fn from_str(s: &str) -> Result<Self> {
        DependencyMode::ALL
            .into_iter()
            .find(|m| m.key() == s || m.to_string() == s)
            .ok_or_else(|| NpprError::UnknownStrategy {
                kind: "dependency mode",
                name: s.to_string(),
            })
    }
}

fn default_mode() -> DependencyMode {
    DependencyMode::JointDep
}
fn default_k() -> usize {
    7
}
fn default_latent() -> usize {
    8
}
fn default_hidden() -> usize {
    64
}
fn default_emb() -> usize {
    16
}
fn default_true() -> bool {
    true
}

/// Shape of the mixture and its heads; the `[gmm]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    #[serde(default = "default_mode")]
    pub mode: DependencyMode,
    /// Number of mixture components.
    #[serde(rename = "modes", default = "default_k")]
    pub k: usize,
    #[serde(default = "default_latent")]
    pub latent_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_emb")]
    pub label_emb_dim: usize,
    #[serde(default = "default_true")]
    pub label_emb_norm: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            k: default_k(),
            latent_dim: default_latent(),
            hidden_dim: default_hidden(),
            label_emb_dim: default_emb(),
            label_emb_norm: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: &str| NpprError::Config {
            path: path.to_string(),
            msg: msg.to_string(),
        };
        if self.k == 0 {
            return Err(bad("gmm.modes", "must be at least 1"));
        }
        if self.latent_dim == 0 {
            return Err(bad("gmm.latent_dim", "must be at least 1"));
        }
        if self.mode.needs_features() && self.hidden_dim == 0 {
            return Err(bad("gmm.hidden_dim", "must be at least 1"));
        }
        if self.mode.needs_labels() && self.label_emb_dim == 0 {
            return Err(bad("gmm.label_emb_dim", "must be at least 1"));
        }
        Ok(())
    }
}

/// Sizes fixed by the classifier the heads attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadContext {
    pub feature_dim: usize,
    pub num_classes: usize,
}

/// Per-batch conditioning inputs.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub batch: usize,
    /// `(B, feature_dim)` classifier features.
    pub features: Option<Var>,
    pub labels: Option<&'a [usize]>,
}

pub trait GmmHead: Send + Sync + fmt::Debug {
    fn mode(&self) -> DependencyMode;
    /// Parameters, all named under `head.`.
    fn init_params(&self, ctx: HeadContext, temps: &Temperatures, rng: &mut Rng) -> ParamSet;
    fn forward(&self, g: &mut Graph, p: &Bound, cond: &Conditioning, temps: &Temperatures) -> Result<GmmVars>;
}

fn normal(rng: &mut Rng, shape: [usize; 2], std: f64) -> Tensor {
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| d.sample(rng))
}

/// Raw Cholesky entries that map to `INIT_CHOL_DIAG · I` at temperature `t_sigma`.
fn chol_raw_init(k: usize, l: usize, t_sigma: f64) -> Vec<f64> {
    let d = raw_for_diag(INIT_CHOL_DIAG, t_sigma);
    let mut v = vec![0.0; k * l * l];
    for c in 0..k {
        for i in 0..l {
            v[c * l * l + i * l + i] = d;
        }
    }
    v
}

fn require_labels<'a>(mode: DependencyMode, cond: &Conditioning<'a>) -> Result<&'a [usize]> {
    let labels = cond.labels.ok_or(NpprError::MissingConditioning { mode, what: "labels" })?;
    if labels.len() != cond.batch {
        return Err(invalid(format!("{} labels for a batch of {}", labels.len(), cond.batch)));
    }
    Ok(labels)
}

fn require_features(mode: DependencyMode, g: &Graph, cond: &Conditioning) -> Result<Var> {
    let f = cond.features.ok_or(NpprError::MissingConditioning { mode, what: "features" })?;
    if g.shape(f).first() != Some(&cond.batch) {
        return Err(invalid(format!("features {:?} for a batch of {}", g.shape(f), cond.batch)));
    }
    Ok(f)
}

fn global_params(cfg: &HeadConfig, temps: &Temperatures, p: &mut ParamSet, with_pi: bool) {
    let (k, l) = (cfg.k, cfg.latent_dim);
    if with_pi {
        p.insert("head.pi", Tensor::zeros([1, k]));
    }
    p.insert("head.mu", Tensor::zeros([1, k * l]));
    p.insert(
        "head.chol",
        Tensor::new([1, k * l * l], chol_raw_init(k, l, temps.t_sigma)).expect("shape"),
    );
}

fn label_params(cfg: &HeadConfig, ctx: HeadContext, rng: &mut Rng, p: &mut ParamSet) {
    let e = cfg.label_emb_dim;
    let mut emb = Tensor::from_fn([ctx.num_classes, e], |_| StandardNormal.sample(rng));
    if cfg.label_emb_norm {
        for r in 0..ctx.num_classes {
            let row = &mut emb.data_mut()[r * e..(r + 1) * e];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    p.insert("head.label.emb", emb);
    p.insert("head.label.pi.w", Tensor::zeros([e, cfg.k]));
    p.insert("head.label.pi.b", Tensor::zeros([cfg.k]));
}

fn trunk_params(cfg: &HeadConfig, ctx: HeadContext, temps: &Temperatures, rng: &mut Rng, p: &mut ParamSet, with_pi: bool) {
    let (k, l, h) = (cfg.k, cfg.latent_dim, cfg.hidden_dim);
    let f = ctx.feature_dim;
    p.insert("head.trunk.w", normal(rng, [f, h], (2.0 / f as f64).sqrt()));
    p.insert("head.trunk.b", Tensor::zeros([h]));
    if with_pi {
        p.insert("head.pi.w", Tensor::zeros([h, k]));
        p.insert("head.pi.b", Tensor::zeros([k]));
    }
    p.insert("head.mu.w", Tensor::zeros([h, k * l]));
    p.insert("head.mu.b", Tensor::zeros([k * l]));
    p.insert("head.chol.w", Tensor::zeros([h, k * l * l]));
    p.insert(
        "head.chol.b",
        Tensor::new([k * l * l], chol_raw_init(k, l, temps.t_sigma)).expect("shape"),
    );
}

/// Broadcasts a `(1, n)` parameter to `(B, n)`.
fn broadcast(g: &mut Graph, v: Var, batch: usize) -> Result<Var> {
    Ok(g.gather_rows(v, &vec![0; batch])?)
}

fn label_logits(g: &mut Graph, p: &Bound, cfg: &HeadConfig, labels: &[usize], temps: &Temperatures) -> Result<Var> {
    let emb = g.gather_rows(p.get("head.label.emb"), labels)?;
    let emb = if cfg.label_emb_norm { g.row_normalize(emb) } else { emb };
    let logits = g.affine(emb, p.get("head.label.pi.w"), p.get("head.label.pi.b"))?;
    Ok(g.scale(logits, 1.0 / temps.t_pi))
}

fn trunk(g: &mut Graph, p: &Bound, features: Var, temps: &Temperatures) -> Result<Var> {
    let h = g.affine(features, p.get("head.trunk.w"), p.get("head.trunk.b"))?;
    let h = g.batch_norm(h)?;
    let h = g.scale(h, 1.0 / temps.t_shared);
    Ok(g.relu(h))
}

fn finish(g: &mut Graph, cfg: &HeadConfig, batch: usize, pi: Var, mu: Var, chol_raw: Var, temps: &Temperatures) -> Result<GmmVars> {
    let (k, l) = (cfg.k, cfg.latent_dim);
    let mu = g.scale(mu, 1.0 / temps.t_mu);
    let means = g.reshape(mu, &[batch, k, l])?;
    let chol = chol_from_raw(g, chol_raw, k, l, temps.t_sigma)?;
    Ok(GmmVars {
        pi_logits: pi,
        means,
        chol,
    })
}

/// One global mixture shared by every input.
#[derive(Debug, Clone)]
pub struct IndependentHead {
    pub cfg: HeadConfig,
}

impl GmmHead for IndependentHead {
    fn mode(&self) -> DependencyMode {
        DependencyMode::Independent
    }

    fn init_params(&self, _ctx: HeadContext, temps: &Temperatures, _rng: &mut Rng) -> ParamSet {
        let mut p = ParamSet::new();
        global_params(&self.cfg, temps, &mut p, true);
        p
    }

    fn forward(&self, g: &mut Graph, p: &Bound, cond: &Conditioning, temps: &Temperatures) -> Result<GmmVars> {
        let b = cond.batch;
        let pi = broadcast(g, p.get("head.pi"), b)?;
        let pi = g.scale(pi, 1.0 / temps.t_pi);
        let mu = broadcast(g, p.get("head.mu"), b)?;
        let chol = broadcast(g, p.get("head.chol"), b)?;
        finish(g, &self.cfg, b, pi, mu, chol, temps)
    }
}

/// Label embedding drives the weights; components are global.
#[derive(Debug, Clone)]
pub struct LabelHead {
    pub cfg: HeadConfig,
}

impl GmmHead for LabelHead {
    fn mode(&self) -> DependencyMode {
        DependencyMode::LabelDep
    }

    fn init_params(&self, ctx: HeadContext, temps: &Temperatures, rng: &mut Rng) -> ParamSet {
        let mut p = ParamSet::new();
        label_params(&self.cfg, ctx, rng, &mut p);
        global_params(&self.cfg, temps, &mut p, false);
        p
    }

    fn forward(&self, g: &mut Graph, p: &Bound, cond: &Conditioning, temps: &Temperatures) -> Result<GmmVars> {
        let labels = require_labels(self.mode(), cond)?;
        let b = cond.batch;
        let pi = label_logits(g, p, &self.cfg, labels, temps)?;
        let mu = broadcast(g, p.get("head.mu"), b)?;
        let chol = broadcast(g, p.get("head.chol"), b)?;
        finish(g, &self.cfg, b, pi, mu, chol, temps)
    }
}

/// Shared trunk over classifier features with three output heads.
#[derive(Debug, Clone)]
pub struct InputHead {
    pub cfg: HeadConfig,
}

impl GmmHead for InputHead {
    fn mode(&self) -> DependencyMode {
        DependencyMode::InputDep
    }

    fn init_params(&self, ctx: HeadContext, temps: &Temperatures, rng: &mut Rng) -> ParamSet {
        let mut p = ParamSet::new();
        trunk_params(&self.cfg, ctx, temps, rng, &mut p, true);
        p
    }

    fn forward(&self, g: &mut Graph, p: &Bound, cond: &Conditioning, temps: &Temperatures) -> Result<GmmVars> {
        let f = require_features(self.mode(), g, cond)?;
        let h = trunk(g, p, f, temps)?;
        let pi = g.affine(h, p.get("head.pi.w"), p.get("head.pi.b"))?;
        let pi = g.scale(pi, 1.0 / temps.t_pi);
        let mu = g.affine(h, p.get("head.mu.w"), p.get("head.mu.b"))?;
        let chol = g.affine(h, p.get("head.chol.w"), p.get("head.chol.b"))?;
        finish(g, &self.cfg, cond.batch, pi, mu, chol, temps)
    }
}

/// Weights from the label embedding, components from the feature trunk.
#[derive(Debug, Clone)]
pub struct JointHead {
    pub cfg: HeadConfig,
}

impl GmmHead for JointHead {
    fn mode(&self) -> DependencyMode {
        DependencyMode::JointDep
    }

    fn init_params(&self, ctx: HeadContext, temps: &Temperatures, rng: &mut Rng) -> ParamSet {
        let mut p = ParamSet::new();
        label_params(&self.cfg, ctx, rng, &mut p);
        trunk_params(&self.cfg, ctx, temps, rng, &mut p, false);
        p
    }

    fn forward(&self, g: &mut Graph, p: &Bound, cond: &Conditioning, temps: &Temperatures) -> Result<GmmVars> {
        let labels = require_labels(self.mode(), cond)?;
        let f = require_features(self.mode(), g, cond)?;
        let pi = label_logits(g, p, &self.cfg, labels, temps)?;
        let h = trunk(g, p, f, temps)?;
        let mu = g.affine(h, p.get("head.mu.w"), p.get("head.mu.b"))?;
        let chol = g.affine(h, p.get("head.chol.w"), p.get("head.chol.b"))?;
        finish(g, &self.cfg, cond.batch, pi, mu, chol, temps)
    }
}

type HeadCtor = fn(&HeadConfig) -> Box<dyn GmmHead>;

/// Head constructors keyed by dependency-mode name.
pub struct HeadRegistry {
    ctors: BTreeMap<&'static str, HeadCtor>,
}

impl Default for HeadRegistry {
    fn default() -> Self {
        let mut r = Self { ctors: BTreeMap::new() };
        r.register("independent", |c| Box::new(IndependentHead { cfg: c.clone() }));
        r.register("label", |c| Box::new(LabelHead { cfg: c.clone() }));
        r.register("input", |c| Box::new(InputHead { cfg: c.clone() }));
        r.register("joint", |c| Box::new(JointHead { cfg: c.clone() }));
        r
    }
}

impl HeadRegistry {
    pub fn register(&mut self, name: &'static str, ctor: HeadCtor) {
        self.ctors.insert(name, ctor);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.ctors.keys().copied()
    }

    pub fn build(&self, cfg: &HeadConfig) -> Result<Box<dyn GmmHead>> {
        let name = cfg.mode.key();
        let ctor = self.ctors.get(name).ok_or_else(|| NpprError::UnknownStrategy {
            kind: "head",
            name: name.to_string(),
        })?;
        Ok(ctor(cfg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm::GmmParams;
    use crate::rng::{substream, Stream};

    fn cfg(mode: DependencyMode) -> HeadConfig {
        HeadConfig {
            mode,
            k: 3,
            latent_dim: 2,
            hidden_dim: 5,
            label_emb_dim: 4,
            label_emb_norm: true,
        }
    }

    const CTX: HeadContext = HeadContext {
        feature_dim: 6,
        num_classes: 3,
    };

    /// Head output with parameters perturbed away from their symmetric init.
    fn run(mode: DependencyMode, labels: &[usize], feats: &Tensor) -> GmmParams {
        let head = HeadRegistry::default().build(&cfg(mode)).unwrap();
        let mut rng = substream(3, Stream::GeneratorInit, 0);
        let mut params = head.init_params(CTX, &Temperatures::UNIT, &mut rng);
        for (_, t) in params.iter_mut() {
            let n = t.numel();
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.1 * ((i * 7 + n) as f64).sin();
            }
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let f = g.constant(feats.clone());
        let cond = Conditioning {
            batch: labels.len(),
            features: Some(f),
            labels: Some(labels),
        };
        let v = head.forward(&mut g, &p, &cond, &Temperatures::UNIT).unwrap();
        GmmParams::from_vars(&g, &v)
    }

    fn feats(b: usize) -> Tensor {
        Tensor::from_fn([b, 6], |i| ((i * 13 % 11) as f64 - 5.0) / 3.0)
    }

    fn rows_equal(t: &Tensor, a: usize, b: usize) -> bool {
        let n = t.numel() / t.shape()[0];
        t.data()[a * n..(a + 1) * n] == t.data()[b * n..(b + 1) * n]
    }

    #[test]
    fn independent_rows_identical() {
        let p = run(DependencyMode::Independent, &[0, 1, 2, 0], &feats(4));
        for b in 1..4 {
            assert!(rows_equal(&p.pi_logits, 0, b));
            assert!(rows_equal(&p.means, 0, b));
            assert!(rows_equal(&p.chol, 0, b));
        }
    }

    #[test]
    fn label_mode_depends_on_label_only() {
        let p = run(DependencyMode::LabelDep, &[0, 1, 0], &feats(3));
        assert!(rows_equal(&p.pi_logits, 0, 2));
        assert!(!rows_equal(&p.pi_logits, 0, 1));
        assert!(rows_equal(&p.means, 0, 1));
    }

    #[test]
    fn joint_mode_shares_pi_per_label_but_not_means() {
        let p = run(DependencyMode::JointDep, &[1, 1, 2], &feats(3));
        assert!(rows_equal(&p.pi_logits, 0, 1));
        assert!(!rows_equal(&p.means, 0, 1));
    }

    #[test]
    fn input_mode_ignores_labels() {
        let a = run(DependencyMode::InputDep, &[0, 1, 2], &feats(3));
        let b = run(DependencyMode::InputDep, &[2, 0, 1], &feats(3));
        assert_eq!(a, b);
    }

    #[test]
    fn init_is_uniform_with_half_identity() {
        for mode in DependencyMode::ALL {
            let head = HeadRegistry::default().build(&cfg(mode)).unwrap();
            let temps = Temperatures {
                tau: 1.0,
                t_pi: 3.0,
                t_mu: 3.0,
                t_sigma: 1.5,
                t_shared: 1.5,
            };
            let mut rng = substream(1, Stream::GeneratorInit, 0);
            let params = head.init_params(CTX, &temps, &mut rng);
            let mut g = Graph::new();
            let p = params.bind(&mut g);
            let f = g.constant(feats(2));
            let cond = Conditioning {
                batch: 2,
                features: Some(f),
                labels: Some(&[0, 2]),
            };
            let v = head.forward(&mut g, &p, &cond, &temps).unwrap();
            let gp = GmmParams::from_vars(&g, &v);
            for b in 0..2 {
                assert!(gp.probs(b).iter().all(|&q| (q - 1.0 / 3.0).abs() < 1e-15));
                for k in 0..3 {
                    assert!(gp.mean(b, k).iter().all(|&m| m == 0.0));
                    let c = gp.chol(b, k);
                    assert!((c[0] - INIT_CHOL_DIAG).abs() < 1e-12);
                    assert!((c[3] - INIT_CHOL_DIAG).abs() < 1e-12);
                    assert_eq!(c[1], 0.0);
                    assert_eq!(c[2], 0.0);
                }
            }
        }
    }

    #[test]
    fn normalized_embeddings_have_unit_rows() {
        let head = HeadRegistry::default().build(&cfg(DependencyMode::LabelDep)).unwrap();
        let mut rng = substream(1, Stream::GeneratorInit, 0);
        let params = head.init_params(CTX, &Temperatures::UNIT, &mut rng);
        let emb = params.get("head.label.emb").unwrap();
        for r in 0..3 {
            let n: f64 = emb.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn missing_conditioning_names_mode() {
        for (mode, what) in [
            (DependencyMode::LabelDep, "labels"),
            (DependencyMode::InputDep, "features"),
            (DependencyMode::JointDep, "labels"),
        ] {
            let head = HeadRegistry::default().build(&cfg(mode)).unwrap();
            let mut rng = substream(1, Stream::GeneratorInit, 0);
            let params = head.init_params(CTX, &Temperatures::UNIT, &mut rng);
            let mut g = Graph::new();
            let p = params.bind(&mut g);
            let cond = Conditioning {
                batch: 2,
                features: None,
                labels: None,
            };
            let err = head.forward(&mut g, &p, &cond, &Temperatures::UNIT).unwrap_err();
            let msg = err.to_string();
            assert!(msg.contains(&mode.to_string()) && msg.contains(what), "{msg}");
        }
    }

    #[test]
    fn zero_modes_rejected_with_path() {
        let c = HeadConfig { k: 0, ..HeadConfig::default() };
        assert!(c.validate().unwrap_err().to_string().contains("gmm.modes"));
    }
}
