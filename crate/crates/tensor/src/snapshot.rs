//! Weight snapshot files.
//!
//! A snapshot is a JSON document:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "tensors": {
//!     "layer0.w": { "shape": [2, 3], "values": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6] }
//!   }
//! }
//! ```
//!
//! Values are row-major. Tensor names are emitted in sorted order and floats
//! use shortest round-trip formatting, so save → load → save is byte-stable.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub format_version: u32,
    pub tensors: BTreeMap<String, TensorEntry>,
}

impl Snapshot {
    pub fn from_params(params: &ParamSet) -> Self {
        let tensors = params
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    TensorEntry {
                        shape: t.shape().to_vec(),
                        values: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            tensors,
        }
    }

    pub fn into_params(self) -> Result<ParamSet> {
        if self.format_version != FORMAT_VERSION {
            return Err(TensorError::Snapshot(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.tensors
            .into_iter()
            .map(|(k, e)| Ok((k, Tensor::new(e.shape, e.values)?)))
            .collect()
    }
}

pub fn params_to_json(params: &ParamSet) -> Result<String> {
    Ok(serde_json::to_string_pretty(&Snapshot::from_params(params))?)
}

pub fn params_from_json(text: &str) -> Result<ParamSet> {
    let snap: Snapshot = serde_json::from_str(text)?;
    snap.into_params()
}

pub fn save_params(path: impl AsRef<Path>, params: &ParamSet) -> Result<()> {
    std::fs::write(path, params_to_json(params)?)?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamSet> {
    params_from_json(&std::fs::read_to_string(path)?)
}
