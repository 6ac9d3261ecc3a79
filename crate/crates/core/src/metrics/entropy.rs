//! Mixture-weight diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, NpprError, Result};

/// `H(π) / ln K` with `0·ln 0 = 0`, clamped to `[0, 1]`.
pub fn entropy_ratio(pi: &[f64]) -> Result<f64> {
    let k = pi.len();
    if k < 2 {
        return Err(NpprError::DegenerateMixture(k));
    }
    if pi.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(invalid("mixture weights must be finite and non-negative"));
    }
    let h: f64 = pi.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    Ok((h / (k as f64).ln()).clamp(0.0, 1.0))
}

/// Max, min and population standard deviation of a weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiStats {
    pub max: f64,
    pub min: f64,
    pub std: f64,
}

impl PiStats {
    pub fn of(pi: &[f64]) -> Self {
        let n = pi.len().max(1) as f64;
        let mean = pi.iter().sum::<f64>() / n;
        let var = pi.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
        Self {
            max: pi.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            min: pi.iter().cloned().fold(f64::INFINITY, f64::min),
            std: var.sqrt(),
        }
    }
}

/// Componentwise mean of several weight vectors.
pub fn mean_weights(rows: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = rows.first() else { return Vec::new() };
    let mut acc = vec![0.0; first.len()];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / rows.len() as f64).collect()
}

/// Mixture summary over a set of inputs: mean per-input entropy ratio, and
/// statistics of the averaged weights. `entropy_ratio` is `None` for `K = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSummary {
    pub entropy_ratio: Option<f64>,
    pub pi: PiStats,
}

pub fn summarize(rows: &[Vec<f64>]) -> Result<MixtureSummary> {
    if rows.is_empty() {
        return Err(NpprError::EmptyDataset);
    }
    let k = rows[0].len();
    let entropy_ratio = if k < 2 {
        None
    } else {
        let mut s = 0.0;
        for r in rows {
            s += entropy_ratio(r)?;
        }
        Some(s / rows.len() as f64)
    };
    Ok(MixtureSummary {
        entropy_ratio,
        pi: PiStats::of(&mean_weights(rows)),
    })
}
