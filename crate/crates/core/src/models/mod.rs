//! Target classifiers and the heads that emit mixture parameters.

mod classifier;
pub mod heads;

pub use classifier::{argmax, argmax_excluding, train_classifier, Classifier, ClassifierSpec, TrainedClassifier};
pub use heads::{Conditioning, DependencyMode, GmmHead, HeadConfig, HeadContext, HeadRegistry};
