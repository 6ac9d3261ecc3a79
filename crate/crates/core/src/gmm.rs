//! Gaussian-mixture perturbation sampling.
//!
//! Training draws relaxed samples through the Gumbel-softmax so gradients
//! reach the mixture weights:
//!
//! ```text
//! z̃ = softmax((log π + g) / τ),  g ~ Gumbel(0, 1)
//! ε = Σ_k z̃_k μ_k + Σ_k z̃_k L_k ξ_k,  ξ_k ~ N(0, I)
//! ```
//!
//! Evaluation draws `z ~ Categorical(π)` exactly and returns `μ_z + L_z ξ_z`.
//! Both samplers consume noise in the same `(rows, K, L)` layout, so a
//! [`Noise`] block can be replayed for common-random-number comparisons.

use nppr_tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Floor on the uniform draw inside the Gumbel transform.
pub const GUMBEL_UNIFORM_FLOOR: f64 = 1e-12;

/// Added to the softplus diagonal of every Cholesky factor.
pub const CHOL_DIAG_FLOOR: f64 = 1e-6;

/// An `init → final` pair, written `[init, final]` in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Anneal {
    pub init: f64,
    pub last: f64,
}

impl From<[f64; 2]> for Anneal {
    fn from(v: [f64; 2]) -> Self {
        Self { init: v[0], last: v[1] }
    }
}

impl From<Anneal> for [f64; 2] {
    fn from(a: Anneal) -> Self {
        [a.init, a.last]
    }
}

impl Anneal {
    pub const fn new(init: f64, last: f64) -> Self {
        Self { init, last }
    }

    pub const fn constant(v: f64) -> Self {
        Self { init: v, last: v }
    }

    /// Linear interpolation over `window` epochs, held at `last` afterwards.
    pub fn at(&self, epoch: usize, window: usize) -> f64 {
        let frac = if window <= 1 {
            1.0
        } else {
            (epoch as f64 / (window - 1) as f64).min(1.0)
        };
        if frac >= 1.0 {
            self.last
        } else {
            self.init + (self.last - self.init) * frac
        }
    }
}

/// Temperature of the Gumbel-softmax relaxation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GumbelConfig {
    pub tau_init: f64,
    pub tau_final: f64,
    pub anneal: bool,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        Self {
            tau_init: 1.0,
            tau_final: 0.1,
            anneal: true,
        }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_final > 0.0) || self.tau_init < self.tau_final {
            return Err(invalid(format!(
                "gumbel temperatures need tau_init >= tau_final > 0, got {} -> {}",
                self.tau_init, self.tau_final
            )));
        }
        Ok(())
    }
}

/// Divisors applied to head outputs before their activations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    pub t_pi: Anneal,
    pub t_mu: Anneal,
    pub t_sigma: Anneal,
    pub t_shared: Anneal,
    /// Epochs over which temperatures move; `None` spans the whole run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_epochs: Option<usize>,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            t_pi: Anneal::new(3.0, 1.0),
            t_mu: Anneal::new(3.0, 1.0),
            t_sigma: Anneal::new(1.5, 1.0),
            t_shared: Anneal::new(1.5, 1.0),
            warmup_epochs: None,
        }
    }
}

impl AnnealSchedule {
    pub fn constant() -> Self {
        Self {
            t_pi: Anneal::constant(1.0),
            t_mu: Anneal::constant(1.0),
            t_sigma: Anneal::constant(1.0),
            t_shared: Anneal::constant(1.0),
            warmup_epochs: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a) in [
            ("t_pi", self.t_pi),
            ("t_mu", self.t_mu),
            ("t_sigma", self.t_sigma),
            ("t_shared", self.t_shared),
        ] {
            if !(a.init > 0.0 && a.last > 0.0) {
                return Err(invalid(format!("{name} temperatures must be positive")));
            }
        }
        Ok(())
    }
}

/// Which temperature [`anneal_value`] reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Temperature {
    Gumbel,
    Pi,
    Mu,
    Sigma,
    Shared,
}

/// Current value of one temperature. Requires `epoch < total_epochs`.
pub fn anneal_value(
    gumbel: &GumbelConfig,
    schedule: &AnnealSchedule,
    which: Temperature,
    epoch: usize,
    total_epochs: usize,
) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(invalid(format!("epoch {epoch} outside run of {total_epochs}")));
    }
    let window = schedule.warmup_epochs.unwrap_or(total_epochs);
    Ok(match which {
        Temperature::Gumbel if gumbel.anneal => Anneal::new(gumbel.tau_init, gumbel.tau_final).at(epoch, total_epochs),
        Temperature::Gumbel => gumbel.tau_init,
        Temperature::Pi => schedule.t_pi.at(epoch, window),
        Temperature::Mu => schedule.t_mu.at(epoch, window),
        Temperature::Sigma => schedule.t_sigma.at(epoch, window),
        Temperature::Shared => schedule.t_shared.at(epoch, window),
    })
}

/// All temperatures in effect for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    pub tau: f64,
    pub t_pi: f64,
    pub t_mu: f64,
    pub t_sigma: f64,
    pub t_shared: f64,
}

impl Temperatures {
    pub const UNIT: Temperatures = Temperatures {
        tau: 1.0,
        t_pi: 1.0,
        t_mu: 1.0,
        t_sigma: 1.0,
        t_shared: 1.0,
    };

    pub fn at(gumbel: &GumbelConfig, schedule: &AnnealSchedule, epoch: usize, total: usize) -> Result<Self> {
        let v = |w| anneal_value(gumbel, schedule, w, epoch, total);
        Ok(Self {
            tau: v(Temperature::Gumbel)?,
            t_pi: v(Temperature::Pi)?,
            t_mu: v(Temperature::Mu)?,
            t_sigma: v(Temperature::Sigma)?,
            t_shared: v(Temperature::Shared)?,
        })
    }
}

/// Mixture parameters on a graph.
#[derive(Debug, Clone, Copy)]
pub struct GmmVars {
    /// `(B, K)`
    pub pi_logits: Var,
    /// `(B, K, L)`
    pub means: Var,
    /// `(B, K, L, L)` lower-triangular
    pub chol: Var,
}

/// Mixture parameter values for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub pi_logits: Tensor,
    pub means: Tensor,
    pub chol: Tensor,
}

impl GmmParams {
    pub fn from_vars(g: &Graph, v: &GmmVars) -> Self {
        Self {
            pi_logits: g.value(v.pi_logits).clone(),
            means: g.value(v.means).clone(),
            chol: g.value(v.chol).clone(),
        }
    }

    pub fn batch(&self) -> usize {
        self.pi_logits.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.pi_logits.shape()[1]
    }

    pub fn latent_dim(&self) -> usize {
        self.means.shape()[2]
    }

    /// Mixture weights of row `b`.
    pub fn probs(&self, b: usize) -> Vec<f64> {
        let row = self.pi_logits.row(b);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn mean(&self, b: usize, k: usize) -> &[f64] {
        let (kk, l) = (self.k(), self.latent_dim());
        let off = (b * kk + k) * l;
        &self.means.data()[off..off + l]
    }

    /// Row-major `L×L` Cholesky factor of component `k` for row `b`.
    pub fn chol(&self, b: usize, k: usize) -> &[f64] {
        let (kk, l) = (self.k(), self.latent_dim());
        let off = (b * kk + k) * l * l;
        &self.chol.data()[off..off + l * l]
    }

    /// Builds a batch of `B` identical rows from one set of mixture values.
    pub fn broadcast(pi: &[f64], means: &[Vec<f64>], chols: &[Vec<f64>], batch: usize) -> Result<Self> {
        let k = pi.len();
        let l = means.first().map(Vec::len).unwrap_or(0);
        if means.len() != k || chols.len() != k || chols.iter().any(|c| c.len() != l * l) {
            return Err(invalid("inconsistent mixture component shapes"));
        }
        let logits: Vec<f64> = pi.iter().map(|p| p.max(1e-300).ln()).collect();
        let rep = |v: Vec<f64>| -> Vec<f64> { (0..batch).flat_map(|_| v.clone()).collect() };
        Ok(Self {
            pi_logits: Tensor::new([batch, k], rep(logits))?,
            means: Tensor::new([batch, k, l], rep(means.concat()))?,
            chol: Tensor::new([batch, k, l, l], rep(chols.concat()))?,
        })
    }
}

/// Lower-triangular factors from raw head output `(B, K·L·L)`: the strictly
/// lower part is `raw / t_sigma`, the diagonal is
/// `softplus(raw / t_sigma) + CHOL_DIAG_FLOOR`, and the upper part is zero.
pub fn chol_from_raw(g: &mut Graph, raw: Var, k: usize, l: usize, t_sigma: f64) -> Result<Var> {
    let b = g.shape(raw)[0];
    let mut off = vec![0.0; k * l * l];
    let mut diag = vec![0.0; k * l * l];
    for c in 0..k {
        for i in 0..l {
            for j in 0..l {
                let idx = c * l * l + i * l + j;
                if i == j {
                    diag[idx] = 1.0;
                } else if j < i {
                    off[idx] = 1.0;
                }
            }
        }
    }
    let off = g.constant(Tensor::new([k * l * l], off)?);
    let diag = g.constant(Tensor::new([k * l * l], diag)?);
    let scaled = g.scale(raw, 1.0 / t_sigma);
    let lower = g.mul(scaled, off)?;
    let sp = g.softplus(scaled);
    let sp = g.add_scalar(sp, CHOL_DIAG_FLOOR);
    let d = g.mul(sp, diag)?;
    let full = g.add(lower, d)?;
    Ok(g.reshape(full, &[b, k, l, l])?)
}

/// Raw diagonal value that [`chol_from_raw`] maps to `target` at temperature `t_sigma`.
pub fn raw_for_diag(target: f64, t_sigma: f64) -> f64 {
    let y = target - CHOL_DIAG_FLOOR;
    t_sigma * y.exp_m1().ln()
}

pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-(u.max(GUMBEL_UNIFORM_FLOOR)).ln()).ln()
}

/// Pre-drawn randomness for `rows` relaxed samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    /// `(rows, K)` Gumbel(0, 1)
    pub gumbel: Tensor,
    /// `(rows, K, L)` standard normal
    pub xi: Tensor,
}

impl Noise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, rows: usize, k: usize, l: usize) -> Self {
        let mut gumbel = Vec::with_capacity(rows * k);
        let mut xi = Vec::with_capacity(rows * k * l);
        for _ in 0..rows {
            for _ in 0..k {
                gumbel.push(gumbel_from_uniform(rng.random::<f64>()));
            }
            for _ in 0..k * l {
                xi.push(StandardNormal.sample(rng));
            }
        }
        Self {
            gumbel: Tensor::new([rows, k], gumbel).expect("shape"),
            xi: Tensor::new([rows, k, l], xi).expect("shape"),
        }
    }
}

/// `softmax((log_softmax(logits) + gumbel) / tau)` with the noise supplied.
pub fn gumbel_softmax_with_noise(g: &mut Graph, pi_logits: Var, gumbel: &Tensor, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(invalid(format!("gumbel temperature must be positive, got {tau}")));
    }
    let logp = g.log_softmax(pi_logits);
    let noise = g.constant(gumbel.clone());
    let s = g.add(logp, noise)?;
    let s = g.scale(s, 1.0 / tau);
    Ok(g.softmax(s))
}

/// Relaxed one-hot draw for each row of `pi_logits`.
pub fn gumbel_softmax_sample<R: Rng + ?Sized>(g: &mut Graph, pi_logits: Var, tau: f64, rng: &mut R) -> Result<Var> {
    let shape = g.shape(pi_logits).to_vec();
    let noise = Tensor::from_fn(shape, |_| gumbel_from_uniform(rng.random::<f64>()));
    gumbel_softmax_with_noise(g, pi_logits, &noise, tau)
}

/// Relaxed perturbations on a graph.
#[derive(Debug, Clone)]
pub struct RelaxedSample {
    /// `(B·M, L)`; rows for input `b` are `b·M .. (b+1)·M`.
    pub latent: Var,
    /// `(B·M, K)`
    pub weights: Var,
    pub noise: Noise,
}

/// Row indices repeating each of `batch` inputs `m` times.
pub fn repeat_index(batch: usize, m: usize) -> Vec<usize> {
    (0..batch).flat_map(|b| std::iter::repeat_n(b, m)).collect()
}

pub fn sample_perturbations_with_noise(g: &mut Graph, p: &GmmVars, m: usize, tau: f64, noise: Noise) -> Result<RelaxedSample> {
    if m == 0 {
        return Err(invalid("samples per input must be at least 1"));
    }
    let ms = g.shape(p.means).to_vec();
    let (b, k, l) = (ms[0], ms[1], ms[2]);
    let rows = b * m;
    if noise.gumbel.shape() != [rows, k] || noise.xi.shape() != [rows, k, l] {
        return Err(invalid(format!(
            "noise shapes {:?}/{:?} do not match {rows} rows, K={k}, L={l}",
            noise.gumbel.shape(),
            noise.xi.shape()
        )));
    }
    let idx = repeat_index(b, m);
    let logits = g.gather_rows(p.pi_logits, &idx)?;
    let weights = gumbel_softmax_with_noise(g, logits, &noise.gumbel, tau)?;
    let means = g.gather_rows(p.means, &idx)?;
    let chol = g.gather_rows(p.chol, &idx)?;
    let chol = g.reshape(chol, &[rows * k, l, l])?;
    let xi = g.constant(noise.xi.reshape([rows * k, l, 1])?);
    let scaled = g.bmm(chol, xi)?;
    let scaled = g.reshape(scaled, &[rows, k, l])?;
    let comp = g.add(means, scaled)?;
    let w = g.reshape(weights, &[rows, k, 1])?;
    let mixed = g.mul(comp, w)?;
    let latent = g.sum_axis(mixed, 1)?;
    Ok(RelaxedSample { latent, weights, noise })
}

/// Draws `m` relaxed samples per row of the mixture.
pub fn sample_perturbations<R: Rng + ?Sized>(g: &mut Graph, p: &GmmVars, m: usize, tau: f64, rng: &mut R) -> Result<RelaxedSample> {
    let ms = g.shape(p.means).to_vec();
    let noise = Noise::draw(rng, ms[0] * m, ms[1], ms[2]);
    sample_perturbations_with_noise(g, p, m, tau, noise)
}

/// Plain-value perturbations for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationBatch {
    /// `(B, M, L)`
    pub latent: Tensor,
    /// `(B, M, K)`; one-hot for exact draws.
    pub weights: Tensor,
    /// `(B, M, K, L)`
    pub draws: Tensor,
}

impl PerturbationBatch {
    /// Selected (or dominant) component per sample, in `(b, m)` order.
    pub fn components(&self) -> Vec<usize> {
        (0..self.weights.rows())
            .map(|r| crate::models::argmax(self.weights.row(r)))
            .collect()
    }
}

/// Categorical draw by inverse CDF; the lowest index wins at boundaries.
pub fn categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc || (u == acc && *p > 0.0) {
            return i;
        }
    }
    // rounding left u above the total mass: fall back to the last positive entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Exact mixture draws for one row: returns `(M·L latent, M components, M·K·L draws)`.
pub fn sample_exact_row<R: Rng + ?Sized>(p: &GmmParams, b: usize, m: usize, rng: &mut R) -> (Vec<f64>, Vec<usize>, Vec<f64>) {
    let (k, l) = (p.k(), p.latent_dim());
    let probs = p.probs(b);
    let mut latent = Vec::with_capacity(m * l);
    let mut comps = Vec::with_capacity(m);
    let mut draws = Vec::with_capacity(m * k * l);
    for _ in 0..m {
        let z = categorical(&probs, rng);
        let start = draws.len();
        for _ in 0..k * l {
            draws.push(StandardNormal.sample(rng));
        }
        let xi = &draws[start + z * l..start + (z + 1) * l];
        let mu = p.mean(b, z);
        let lz = p.chol(b, z);
        for i in 0..l {
            let mut v = mu[i];
            for j in 0..=i {
                v += lz[i * l + j] * xi[j];
            }
            latent.push(v);
        }
        comps.push(z);
    }
    (latent, comps, draws)
}

/// Exact (non-relaxed) draws: `z ~ Categorical(softmax(pi_logits))`, `ε = μ_z + L_z ξ`.
pub fn sample_exact<R: Rng + ?Sized>(p: &GmmParams, m: usize, rng: &mut R) -> Result<PerturbationBatch> {
    if m == 0 {
        return Err(invalid("samples per input must be at least 1"));
    }
    let (b, k, l) = (p.batch(), p.k(), p.latent_dim());
    let mut latent = Vec::with_capacity(b * m * l);
    let mut weights = vec![0.0; b * m * k];
    let mut draws = Vec::with_capacity(b * m * k * l);
    for row in 0..b {
        let (lat, comps, dr) = sample_exact_row(p, row, m, rng);
        latent.extend(lat);
        draws.extend(dr);
        for (j, z) in comps.into_iter().enumerate() {
            weights[(row * m + j) * k + z] = 1.0;
        }
    }
    Ok(PerturbationBatch {
        latent: Tensor::new([b, m, l], latent)?,
        weights: Tensor::new([b, m, k], weights)?,
        draws: Tensor::new([b, m, k, l], draws)?,
    })
}
