//! Losses, robustness estimators and mixture diagnostics.

pub mod entropy;
pub mod estimate;
pub mod loss;
pub mod registry;
pub mod report;

pub use entropy::{entropy_ratio, summarize, MixtureSummary, PiStats};
pub use estimate::{
    ar_cw, ar_pgd, attack, clean_accuracy, difference_half_width, mc_accuracy, nppr_estimate, pr_estimate, AttackConfig,
    AttackLoss, AttackOutcome, BaselineLaw, ClippedGaussian, Estimate, LearnedLaw, PerturbationLaw, UniformBall,
};
pub use loss::{cross_entropy_terms, margin_loss, margin_terms, margin_value};
pub use registry::{EstimatorRegistry, EvalContext, RobustnessEstimator};
pub use report::{format_percent, ExperimentKey, RobustnessReport};
