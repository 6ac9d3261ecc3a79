//! Learned perturbation laws for probabilistic robustness: data, frozen
//! classifiers, mixture generators, estimators, oracles and experiment runs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod gmm;
pub mod metrics;
pub mod models;
pub mod oracle;
pub mod rng;
pub mod trainer;
pub mod upsample;

pub use config::{parse_config, ExperimentConfig};
pub use data::{make_dataset, make_split, Dataset, DatasetKind, DatasetSpec, InputKind};
pub use error::{NpprError, Result};
pub use experiment::{run_experiment, run_sweep, ExperimentOutcome, Manifest};
pub use generator::Generator;
pub use metrics::{Estimate, RobustnessReport};
pub use models::{Classifier, ClassifierSpec, DependencyMode, HeadConfig};
pub use oracle::{verify_propositions, Verdict};
pub use trainer::{TrainConfig, Trainer};
