//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::{Grads, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers and step counter.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN or infinity; nothing was changed.
    SkippedNonFinite,
}

/// Applies one Adam update to every parameter that has a gradient.
/// Parameters without a gradient entry are left alone.
pub fn adam_step(params: &mut ParamSet, grads: &Grads, state: &mut AdamState, cfg: &AdamConfig) -> StepOutcome {
    if let Some((name, _)) = grads.iter().find(|(_, g)| g.has_non_finite()) {
        log::warn!("adam: non-finite gradient for {name}, step {} skipped", state.step + 1);
        return StepOutcome::SkippedNonFinite;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let pd = p.data_mut();
        for (((pv, &gv), mv), vv) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    StepOutcome::Applied
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::scalar(v));
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t=1: mhat = g, vhat = g², update = lr * g / (|g| + eps)
        let mut p = one("w", 1.0);
        let mut grads = Grads::new();
        grads.insert("w".into(), Tensor::scalar(1.0));
        let mut st = AdamState::default();
        let cfg = AdamConfig {
            lr: 1e-3,
            ..Default::default()
        };
        assert_eq!(adam_step(&mut p, &grads, &mut st, &cfg), StepOutcome::Applied);
        let expected = 1.0 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_leaves_param_and_decays_moments() {
        let mut p = one("w", 2.0);
        let mut st = AdamState::default();
        let cfg = AdamConfig::default();
        let mut g1 = Grads::new();
        g1.insert("w".into(), Tensor::scalar(1.0));
        adam_step(&mut p, &g1, &mut st, &cfg);
        let after_first = p.get("w").unwrap().item();
        let m1 = st.m["w"].item();
        let mut g0 = Grads::new();
        g0.insert("w".into(), Tensor::scalar(0.0));
        // non-zero momentum still moves the parameter; a fresh state must not
        let mut fresh = AdamState::default();
        let mut q = one("w", 2.0);
        adam_step(&mut q, &g0, &mut fresh, &cfg);
        assert_eq!(q.get("w").unwrap().item(), 2.0);
        adam_step(&mut p, &g0, &mut st, &cfg);
        assert!((st.m["w"].item() - 0.9 * m1).abs() < 1e-15);
        assert!(p.get("w").unwrap().item() < after_first);
    }

    #[test]
    fn nan_gradient_skips() {
        let mut p = one("w", 1.0);
        let mut grads = Grads::new();
        grads.insert("w".into(), Tensor::scalar(f64::NAN));
        let mut st = AdamState::default();
        let out = adam_step(&mut p, &grads, &mut st, &AdamConfig::default());
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(p.get("w").unwrap().item(), 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn default_lr() {
        assert_eq!(AdamConfig::default().lr, 5e-4);
    }
}
