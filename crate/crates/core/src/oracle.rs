//! Brute-force grid verifiers for low-dimensional instances, and the
//! ordering checks over a set of reports.
//!
//! Only the classifier forward pass is shared with the estimators.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use nppr_tensor::Tensor;

use crate::error::{invalid, NpprError, Result};
use crate::metrics::{difference_half_width, Estimate, RobustnessReport};
use crate::models::{argmax, Classifier, DependencyMode};

pub const DEFAULT_GRID_CAP: u128 = 1_000_000;
const MAX_DIMS: usize = 3;
/// Grid points per classifier call.
const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: usize,
    /// Odd and at least 3, so the grid contains the centre.
    pub points_per_dim: usize,
    pub gamma: f64,
    pub cap: u128,
}

impl GridSpec {
    pub fn new(dims: usize, points_per_dim: usize, gamma: f64) -> Self {
        Self {
            dims,
            points_per_dim,
            gamma,
            cap: DEFAULT_GRID_CAP,
        }
    }

    pub fn total(&self) -> u128 {
        (self.points_per_dim as u128).pow(self.dims as u32)
    }

    fn validate(&self, input_dim: usize) -> Result<()> {
        if self.dims == 0 || self.dims > MAX_DIMS {
            return Err(invalid(format!("grid oracle supports 1..={MAX_DIMS} dims, got {}", self.dims)));
        }
        if input_dim != self.dims {
            return Err(invalid(format!("grid has {} dims, input has {input_dim}", self.dims)));
        }
        if self.points_per_dim < 3 || self.points_per_dim.is_multiple_of(2) {
            return Err(invalid(format!(
                "points_per_dim must be odd and at least 3, got {}",
                self.points_per_dim
            )));
        }
        if !(self.gamma >= 0.0) {
            return Err(invalid("grid radius must be non-negative"));
        }
        if self.total() > self.cap {
            return Err(NpprError::GridCapExceeded {
                points: self.total(),
                cap: self.cap,
            });
        }
        Ok(())
    }

    /// Multi-index of flat grid point `flat`, first dimension slowest.
    fn index(&self, mut flat: usize, out: &mut [usize]) {
        for j in (0..self.dims).rev() {
            out[j] = flat % self.points_per_dim;
            flat /= self.points_per_dim;
        }
    }
}

/// Predictions on `x + offsets[r]` for every grid point in `[lo, hi)`.
fn predict_offsets(clf: &Classifier, x: &[f64], grid: &GridSpec, lo: usize, hi: usize, coord: &dyn Fn(usize) -> f64) -> Result<Vec<usize>> {
    let d = grid.dims;
    let mut idx = vec![0; d];
    let mut data = Vec::with_capacity((hi - lo) * d);
    for flat in lo..hi {
        grid.index(flat, &mut idx);
        for j in 0..d {
            data.push(x[j] + coord(idx[j]));
        }
    }
    clf.predict(&Tensor::new([hi - lo, d], data)?)
}

fn chunks(total: usize) -> Vec<(usize, usize)> {
    (0..total).step_by(CHUNK).map(|lo| (lo, (lo + CHUNK).min(total))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArVerdict {
    pub robust: bool,
    /// First label-flipping offset in lexicographic grid order.
    pub worst_offset: Option<Vec<f64>>,
}

/// Exhaustive search of the lattice `{−γ, …, 0, …, γ}^d` (endpoints included).
pub fn oracle_ar(clf: &Classifier, x: &[f64], y: usize, grid: &GridSpec) -> Result<ArVerdict> {
    grid.validate(x.len())?;
    let n = grid.points_per_dim;
    let step = 2.0 * grid.gamma / (n - 1) as f64;
    let coord = move |i: usize| -grid.gamma + i as f64 * step;
    let total = grid.total() as usize;
    let first = chunks(total)
        .into_par_iter()
        .map(|(lo, hi)| -> Result<Option<usize>> {
            let pred = predict_offsets(clf, x, grid, lo, hi, &coord)?;
            Ok(pred.iter().position(|&p| p != y).map(|r| lo + r))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .min();
    Ok(match first {
        None => ArVerdict {
            robust: true,
            worst_offset: None,
        },
        Some(flat) => {
            let mut idx = vec![0; grid.dims];
            grid.index(flat, &mut idx);
            ArVerdict {
                robust: false,
                worst_offset: Some(idx.into_iter().map(coord).collect()),
            }
        }
    })
}

/// Law whose per-coordinate cell masses drive the quadrature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "law")]
pub enum QuadratureLaw {
    Uniform,
    /// `N(0, σ²)` clipped into `[−γ, γ]`; the clipped tails sit in the end cells.
    ClippedGaussian { sigma: f64 },
}

/// Probability of each of `n` equal cells partitioning `[−γ, γ]`.
fn cell_masses(law: QuadratureLaw, gamma: f64, n: usize) -> Result<Vec<f64>> {
    match law {
        QuadratureLaw::Uniform => Ok(vec![1.0 / n as f64; n]),
        QuadratureLaw::ClippedGaussian { sigma } => {
            let nd = Normal::new(0.0, sigma).map_err(|e| invalid(format!("gaussian sigma: {e}")))?;
            let w = 2.0 * gamma / n as f64;
            let edge = |i: usize| -gamma + i as f64 * w;
            Ok((0..n)
                .map(|i| {
                    let lo = if i == 0 { 0.0 } else { nd.cdf(edge(i)) };
                    let hi = if i + 1 == n { 1.0 } else { nd.cdf(edge(i + 1)) };
                    hi - lo
                })
                .collect())
        }
    }
}

/// Cell-centred quadrature of `P[h(x + δ) = y]` over the ball.
pub fn oracle_pr(clf: &Classifier, x: &[f64], y: usize, law: QuadratureLaw, grid: &GridSpec) -> Result<f64> {
    grid.validate(x.len())?;
    let n = grid.points_per_dim;
    let w = 2.0 * grid.gamma / n as f64;
    let coord = move |i: usize| -grid.gamma + (i as f64 + 0.5) * w;
    let masses = cell_masses(law, grid.gamma, n)?;
    let total = grid.total() as usize;
    let parts = chunks(total)
        .into_par_iter()
        .map(|(lo, hi)| -> Result<f64> {
            let pred = predict_offsets(clf, x, grid, lo, hi, &coord)?;
            let mut idx = vec![0; grid.dims];
            let mut acc = 0.0;
            for (r, &p) in pred.iter().enumerate() {
                if p == y {
                    grid.index(lo + r, &mut idx);
                    acc += idx.iter().map(|&i| masses[i]).product::<f64>();
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(parts.iter().sum::<f64>())
}

/// Closed form for a two-logit linear model: the label flips somewhere in
/// the ball iff the signed margin is at most `γ‖w‖₁`.
pub fn linear_flips(w: &[f64], b: f64, x: &[f64], y: usize, gamma: f64) -> bool {
    let f: f64 = w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b;
    let margin = if y == 1 { f } else { -f };
    margin <= gamma * w.iter().map(|v| v.abs()).sum::<f64>()
}

/// One `lhs ≤ rhs` check with its tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inequality {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub half_width: f64,
    /// `rhs + half_width − lhs`; negative when the check fails.
    pub margin: f64,
    pub pass: bool,
}

impl Inequality {
    pub fn check(name: impl Into<String>, lhs: &Estimate, rhs: &Estimate) -> Self {
        let half_width = difference_half_width(lhs, rhs);
        let margin = rhs.value + half_width - lhs.value;
        Self {
            name: name.into(),
            lhs: lhs.value,
            rhs: rhs.value,
            half_width,
            margin,
            pass: margin >= 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub inequalities: Vec<Inequality>,
    pub pass: bool,
}

impl Verdict {
    pub fn failures(&self) -> impl Iterator<Item = &Inequality> {
        self.inequalities.iter().filter(|i| !i.pass)
    }
}

/// Checks `AR ≤ NPPR ≤ PR` for every report and `conditional ≤ independent`
/// for every conditional report when an independent one is present.
pub fn verify_propositions(reports: &[RobustnessReport]) -> Result<Verdict> {
    let Some(first) = reports.first() else {
        return Err(invalid("no reports to verify"));
    };
    if let Some(r) = reports.iter().find(|r| r.key != first.key) {
        return Err(NpprError::MismatchedExperiments(format!("{:?} vs {:?}", first.key, r.key)));
    }
    let mut out = Vec::new();
    for r in reports {
        let tag = format!("{}/K={}", r.mode.key(), r.modes);
        out.push(Inequality::check(format!("{tag}: ar_pgd <= nppr_test"), &r.ar_pgd, &r.nppr_test));
        out.push(Inequality::check(format!("{tag}: nppr_test <= pr_uniform"), &r.nppr_test, &r.pr_uniform));
        out.push(Inequality::check(format!("{tag}: nppr_test <= pr_gaussian"), &r.nppr_test, &r.pr_gaussian));
    }
    for indep in reports.iter().filter(|r| r.mode == DependencyMode::Independent) {
        for r in reports.iter().filter(|r| r.mode != DependencyMode::Independent && r.modes == indep.modes) {
            out.push(Inequality::check(
                format!("{}/K={}: nppr_test <= independent", r.mode.key(), r.modes),
                &r.nppr_test,
                &indep.nppr_test,
            ));
        }
    }
    let pass = out.iter().all(|i| i.pass);
    Ok(Verdict { inequalities: out, pass })
}

/// Fraction of points whose grid oracle finds no flip.
pub fn oracle_ar_fraction(clf: &Classifier, inputs: &Tensor, labels: &[usize], grid: &GridSpec) -> Result<f64> {
    let mut robust = 0;
    for (i, &y) in labels.iter().enumerate() {
        if oracle_ar(clf, inputs.row(i), y, grid)?.robust {
            robust += 1;
        }
    }
    Ok(robust as f64 / labels.len().max(1) as f64)
}

/// Predicted class of `x` alone.
pub fn predict_one(clf: &Classifier, x: &[f64]) -> Result<usize> {
    let logits = clf.logits_values(&Tensor::new([1, x.len()], x.to_vec())?)?;
    Ok(argmax(logits.row(0)))
}
