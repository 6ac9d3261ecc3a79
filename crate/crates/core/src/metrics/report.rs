//! Final metrics of one run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::metrics::estimate::Estimate;
use crate::models::DependencyMode;

/// Identifies the `(classifier, dataset, γ)` a report was computed on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExperimentKey {
    pub dataset: String,
    pub classifier: String,
    /// Radius as written in the config, e.g. `16/255`.
    pub gamma: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub key: ExperimentKey,
    pub mode: DependencyMode,
    pub modes: usize,
    pub gamma: f64,
    pub nppr_test: Estimate,
    pub nppr_train: Estimate,
    pub pr_gaussian: Estimate,
    pub pr_uniform: Estimate,
    pub ar_pgd: Estimate,
    pub ar_cw: Estimate,
    pub clean_accuracy: Estimate,
    /// `None` when the mixture has a single component.
    pub entropy_ratio: Option<f64>,
    pub pi_max: f64,
    pub pi_min: f64,
    pub pi_std: f64,
    /// Probability fields as percentages with two decimals.
    pub percent: BTreeMap<String, String>,
}

impl RobustnessReport {
    /// Probability-valued fields by name.
    pub fn probabilities(&self) -> [(&'static str, &Estimate); 7] {
        [
            ("nppr_test", &self.nppr_test),
            ("nppr_train", &self.nppr_train),
            ("pr_gaussian", &self.pr_gaussian),
            ("pr_uniform", &self.pr_uniform),
            ("ar_pgd", &self.ar_pgd),
            ("ar_cw", &self.ar_cw),
            ("clean_accuracy", &self.clean_accuracy),
        ]
    }

    /// Recomputes [`Self::percent`] from the estimates.
    pub fn fill_percent(&mut self) {
        let mut p: BTreeMap<String, String> = self
            .probabilities()
            .iter()
            .map(|(k, e)| (k.to_string(), format_percent(e.value)))
            .collect();
        if let Some(er) = self.entropy_ratio {
            p.insert("entropy_ratio".into(), format_percent(er));
        }
        self.percent = p;
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

pub fn format_percent(p: f64) -> String {
    format!("{:.2}", 100.0 * p)
}
