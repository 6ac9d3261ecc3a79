//! Differentiable objectives on classifier logits.

use nppr_tensor::{Graph, Var};

use crate::error::{NpprError, Result};
use crate::models::argmax_excluding;

/// Per-row runner-up class: the largest logit other than the label.
pub fn runner_up(g: &Graph, logits: Var, labels: &[usize]) -> Vec<usize> {
    let v = g.value(logits);
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| argmax_excluding(v.row(r), y))
        .collect()
}

/// Per-row `softplus(h_y − max_{j≠y} h_j + κ)`, shape `(R)`.
pub fn margin_terms(g: &mut Graph, logits: Var, labels: &[usize], kappa: f64) -> Result<Var> {
    let c = g.shape(logits)[1];
    if c < 2 {
        return Err(NpprError::TooFewClasses(c));
    }
    let other = runner_up(g, logits, labels);
    let true_logit = g.pick_cols(logits, labels)?;
    let other_logit = g.pick_cols(logits, &other)?;
    let gap = g.sub(true_logit, other_logit)?;
    let gap = g.add_scalar(gap, kappa);
    Ok(g.softplus(gap))
}

/// Mean margin loss over all rows.
pub fn margin_loss(g: &mut Graph, logits: Var, labels: &[usize], kappa: f64) -> Result<Var> {
    let t = margin_terms(g, logits, labels, kappa)?;
    Ok(g.mean(t))
}

/// Per-row cross-entropy, shape `(R)`.
pub fn cross_entropy_terms(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let lsm = g.log_softmax(logits);
    let picked = g.pick_cols(lsm, labels)?;
    Ok(g.scale(picked, -1.0))
}

/// Plain-value margin loss of one logit row.
pub fn margin_value(row: &[f64], y: usize, kappa: f64) -> f64 {
    let j = argmax_excluding(row, y);
    let z = row[y] - row[j] + kappa;
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}
