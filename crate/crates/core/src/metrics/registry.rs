//! Robustness estimators selectable by name.

use std::collections::BTreeMap;

use crate::data::Dataset;
use crate::error::{invalid, NpprError, Result};
use crate::generator::Generator;
use crate::metrics::estimate::{ar_cw, ar_pgd, clean_accuracy, nppr_estimate, pr_estimate, BaselineLaw, Estimate};
use crate::models::Classifier;

/// Everything an estimator may read.
pub struct EvalContext<'a> {
    pub classifier: &'a Classifier,
    pub dataset: &'a Dataset,
    pub gamma: f64,
    pub generator: Option<&'a Generator>,
    /// Draws per input for Monte-Carlo estimators.
    pub samples: usize,
    pub seed: u64,
    pub pgd_steps: usize,
    pub cw_steps: usize,
    pub kappa: f64,
    /// Clipped-Gaussian baseline uses `σ = γ / sigma_divisor`.
    pub sigma_divisor: f64,
}

pub trait RobustnessEstimator: Send + Sync {
    fn name(&self) -> &'static str;
    fn estimate(&self, ctx: &EvalContext) -> Result<Estimate>;
}

struct Nppr;
struct PrUniform;
struct PrGaussian;
struct ArPgd;
struct ArCw;
struct Clean;

impl RobustnessEstimator for Nppr {
    fn name(&self) -> &'static str {
        "nppr"
    }
    fn estimate(&self, c: &EvalContext) -> Result<Estimate> {
        let gen = c.generator.ok_or_else(|| invalid("nppr estimator needs a generator"))?;
        nppr_estimate(c.classifier, gen, c.dataset, c.samples, c.seed)
    }
}

impl RobustnessEstimator for PrUniform {
    fn name(&self) -> &'static str {
        "pr-uniform"
    }
    fn estimate(&self, c: &EvalContext) -> Result<Estimate> {
        pr_estimate(c.classifier, c.dataset, BaselineLaw::Uniform, c.gamma, c.samples, c.seed)
    }
}

impl RobustnessEstimator for PrGaussian {
    fn name(&self) -> &'static str {
        "pr-gaussian"
    }
    fn estimate(&self, c: &EvalContext) -> Result<Estimate> {
        let law = BaselineLaw::ClippedGaussian {
            sigma: c.gamma / c.sigma_divisor,
        };
        pr_estimate(c.classifier, c.dataset, law, c.gamma, c.samples, c.seed)
    }
}

impl RobustnessEstimator for ArPgd {
    fn name(&self) -> &'static str {
        "ar-pgd"
    }
    fn estimate(&self, c: &EvalContext) -> Result<Estimate> {
        ar_pgd(c.classifier, c.dataset, c.gamma, c.pgd_steps, c.seed)
    }
}

impl RobustnessEstimator for ArCw {
    fn name(&self) -> &'static str {
        "ar-cw"
    }
    fn estimate(&self, c: &EvalContext) -> Result<Estimate> {
        ar_cw(c.classifier, c.dataset, c.gamma, c.cw_steps, c.kappa, c.seed)
    }
}

impl RobustnessEstimator for Clean {
    fn name(&self) -> &'static str {
        "clean"
    }
    fn estimate(&self, c: &EvalContext) -> Result<Estimate> {
        clean_accuracy(c.classifier, c.dataset)
    }
}

pub struct EstimatorRegistry {
    estimators: BTreeMap<&'static str, Box<dyn RobustnessEstimator>>,
}

impl Default for EstimatorRegistry {
    fn default() -> Self {
        let mut r = Self {
            estimators: BTreeMap::new(),
        };
        r.register(Box::new(Nppr));
        r.register(Box::new(PrUniform));
        r.register(Box::new(PrGaussian));
        r.register(Box::new(ArPgd));
        r.register(Box::new(ArCw));
        r.register(Box::new(Clean));
        r
    }
}

impl EstimatorRegistry {
    pub fn register(&mut self, e: Box<dyn RobustnessEstimator>) {
        self.estimators.insert(e.name(), e);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.estimators.keys().copied()
    }

    pub fn get(&self, name: &str) -> Result<&dyn RobustnessEstimator> {
        self.estimators
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| NpprError::UnknownStrategy {
                kind: "estimator",
                name: name.to_string(),
            })
    }

    pub fn run(&self, name: &str, ctx: &EvalContext) -> Result<Estimate> {
        self.get(name)?.estimate(ctx)
    }
}
