//! Synthetic labeled datasets and their CSV form.

use std::path::Path;

use nppr_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, NpprError, Result};
use crate::rng::{substream, Stream};

/// Layout of one input row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Flat { dim: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl InputKind {
    pub fn dim(&self) -> usize {
        match *self {
            InputKind::Flat { dim } => dim,
            InputKind::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(N, d)` row-major inputs.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub kind: InputKind,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, kind: InputKind) -> Result<Self> {
        if inputs.rank() != 2 || inputs.shape()[0] != labels.len() || inputs.shape()[1] != kind.dim() {
            return Err(invalid(format!(
                "dataset inputs {:?} do not match {} labels of dim {}",
                inputs.shape(),
                labels.len(),
                kind.dim()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    /// Inputs and labels for the given row indices.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.input(i));
        }
        let x = Tensor::new([idx.len(), d], data).expect("row width");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let (inputs, labels) = self.batch(idx);
        Dataset {
            inputs,
            labels,
            num_classes: self.num_classes,
            kind: self.kind,
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("feature_{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.input(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, num_classes: usize, kind: InputKind) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        let d = kind.dim();
        let expected: Vec<String> = (0..d)
            .map(|j| format!("feature_{j}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        if headers.iter().ne(expected.iter().map(String::as_str)) {
            return Err(invalid(format!("unexpected CSV header {headers:?}")));
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for j in 0..d {
                data.push(rec[j].parse::<f64>().map_err(|e| invalid(format!("feature_{j}: {e}")))?);
            }
            labels.push(rec[d].parse::<usize>().map_err(|e| invalid(format!("label: {e}")))?);
        }
        let n = labels.len();
        Dataset::new(Tensor::new([n, d], data)?, labels, num_classes, kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Blobs,
    Rings,
    GridImage,
}

fn default_dim() -> usize {
    16
}
fn default_image() -> [usize; 3] {
    [1, 8, 8]
}
fn default_classes() -> usize {
    10
}
fn default_n_train() -> usize {
    1000
}
fn default_n_test() -> usize {
    250
}
fn default_separation() -> f64 {
    3.0
}
fn default_noise() -> f64 {
    0.05
}

/// Synthetic dataset description.
///
/// `noise` is the per-coordinate standard deviation σ. `separation` is in
/// units of σ: blob centers sit at distance `separation·σ` from the origin,
/// ring `k` has radius `(k+1)·separation·σ`, and image bumps have amplitude
/// `separation·σ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_image")]
    pub image: [usize; 3],
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetSpec {
    pub fn blobs(dim: usize, classes: usize, n_train: usize, n_test: usize) -> Self {
        Self {
            kind: DatasetKind::Blobs,
            dim,
            image: default_image(),
            classes,
            n_train,
            n_test,
            separation: default_separation(),
            noise: default_noise(),
            seed: 0,
        }
    }

    pub fn input_kind(&self) -> InputKind {
        match self.kind {
            DatasetKind::GridImage => InputKind::Image {
                channels: self.image[0],
                height: self.image[1],
                width: self.image[2],
            },
            _ => InputKind::Flat { dim: self.dim },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: &str| NpprError::Config {
            path: format!("dataset.{path}"),
            msg: msg.into(),
        };
        if self.classes < 1 {
            return Err(bad("classes", "must be at least 1"));
        }
        if self.n_train == 0 {
            return Err(bad("n_train", "must be positive"));
        }
        if !(self.noise > 0.0) || !self.noise.is_finite() {
            return Err(bad("noise", "must be positive and finite"));
        }
        if !self.separation.is_finite() || self.separation < 0.0 {
            return Err(bad("separation", "must be non-negative and finite"));
        }
        match self.kind {
            DatasetKind::Blobs if self.dim == 0 => Err(bad("dim", "must be positive")),
            DatasetKind::Rings if self.dim < 2 => Err(bad("dim", "rings need dim >= 2")),
            DatasetKind::GridImage if self.image.contains(&0) => Err(bad("image", "all extents must be positive")),
            _ => Ok(()),
        }
    }
}

/// Class centers used by the blob generator. Two classes are antipodal;
/// up to `dim` classes get orthogonal directions; beyond that directions are
/// random unit vectors.
pub fn blob_centers(spec: &DatasetSpec) -> Vec<Vec<f64>> {
    let mut rng = substream(spec.seed, Stream::Dataset, u64::MAX);
    let d = spec.dim;
    let radius = spec.separation * spec.noise;
    let unit = |rng: &mut crate::rng::Rng| -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-9 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    };
    let c = spec.classes;
    if c == 1 {
        return vec![vec![0.0; d]];
    }
    if c == 2 {
        let u = unit(&mut rng);
        return vec![u.iter().map(|x| -radius * x).collect(), u.iter().map(|x| radius * x).collect()];
    }
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(c);
    for k in 0..c {
        let mut v = unit(&mut rng);
        if k < d {
            for prev in &dirs {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(prev) {
                    *a -= dot * b;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
        }
        dirs.push(v);
    }
    dirs.into_iter().map(|v| v.into_iter().map(|x| radius * x).collect()).collect()
}

/// Generates `n_train + n_test` samples with labels assigned round-robin.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.n_train + spec.n_test;
    let kind = spec.input_kind();
    let d = kind.dim();
    let sigma = spec.noise;
    let mut rng = substream(spec.seed, Stream::Dataset, 0);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let normal = |rng: &mut crate::rng::Rng| -> f64 { StandardNormal.sample(rng) };
    match spec.kind {
        DatasetKind::Blobs => {
            let centers = blob_centers(spec);
            for i in 0..n {
                let y = i % spec.classes;
                for &c in &centers[y] {
                    data.push(c + sigma * normal(&mut rng));
                }
                labels.push(y);
            }
        }
        DatasetKind::Rings => {
            for i in 0..n {
                let y = i % spec.classes;
                let r = (y + 1) as f64 * spec.separation * sigma;
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                data.push(r * theta.cos() + sigma * normal(&mut rng));
                data.push(r * theta.sin() + sigma * normal(&mut rng));
                for _ in 2..d {
                    data.push(sigma * normal(&mut rng));
                }
                labels.push(y);
            }
        }
        DatasetKind::GridImage => {
            let [c, h, w] = spec.image;
            let amp = spec.separation * sigma;
            let radius = (h.min(w) as f64) / 4.0;
            let width = (h.min(w) as f64 / 6.0).max(0.75);
            for i in 0..n {
                let y = i % spec.classes;
                let angle = std::f64::consts::TAU * y as f64 / spec.classes as f64;
                let cy = (h as f64 - 1.0) / 2.0 + radius * angle.sin();
                let cx = (w as f64 - 1.0) / 2.0 + radius * angle.cos();
                for _ in 0..c {
                    for py in 0..h {
                        for px in 0..w {
                            let d2 = (py as f64 - cy).powi(2) + (px as f64 - cx).powi(2);
                            data.push(amp * (-d2 / (2.0 * width * width)).exp() + sigma * normal(&mut rng));
                        }
                    }
                }
                labels.push(y);
            }
        }
    }
    Dataset::new(Tensor::new([n, d], data)?, labels, spec.classes, kind)
}

/// Splits off roughly `test_fraction` of each class as the test set.
pub fn stratified_split(ds: &Dataset, test_fraction: f64, seed: u64) -> (Dataset, Dataset) {
    let mut rng = substream(seed, Stream::Split, 0);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..ds.num_classes {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (ds.subset(&train), ds.subset(&test))
}

/// Generates a dataset and splits it into its configured train and test sizes.
pub fn make_split(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    let ds = make_dataset(spec)?;
    let frac = spec.n_test as f64 / (spec.n_train + spec.n_test) as f64;
    Ok(stratified_split(&ds, frac, spec.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_samples() {
        let spec = DatasetSpec::blobs(4, 3, 30, 10);
        assert_eq!(make_dataset(&spec).unwrap(), make_dataset(&spec).unwrap());
        let mut other = spec.clone();
        other.seed = 9;
        assert_ne!(make_dataset(&spec).unwrap().inputs, make_dataset(&other).unwrap().inputs);
    }

    #[test]
    fn split_is_stratified() {
        let spec = DatasetSpec::blobs(3, 4, 80, 20);
        let (train, test) = make_split(&spec).unwrap();
        assert_eq!(train.len() + test.len(), 100);
        for c in 0..4 {
            let n = test.labels.iter().filter(|&&y| y == c).count();
            assert_eq!(n, 5);
        }
    }

    #[test]
    fn orthogonal_centers_when_room() {
        let spec = DatasetSpec::blobs(6, 4, 10, 0);
        let cs = blob_centers(&spec);
        for i in 0..4 {
            for j in 0..i {
                let dot: f64 = cs[i].iter().zip(&cs[j]).map(|(a, b)| a * b).sum();
                assert!(dot.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let spec = DatasetSpec::blobs(3, 2, 6, 0);
        let ds = make_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        ds.write_csv(&p).unwrap();
        let back = Dataset::read_csv(&p, 2, ds.kind).unwrap();
        assert_eq!(back, ds);
        let header = std::fs::read_to_string(&p).unwrap();
        assert!(header.starts_with("feature_0,feature_1,feature_2,label\n"));
    }

    #[test]
    fn rejects_out_of_range_label() {
        let x = Tensor::zeros([1, 2]);
        assert!(Dataset::new(x, vec![3], 2, InputKind::Flat { dim: 2 }).is_err());
    }
}
