use nppr_tensor::{adam_step, AdamConfig, AdamState, Bound, Graph, ParamSet, Tensor, Var};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, InputKind};
use crate::error::{invalid, NpprError, Result};
use crate::rng::{substream, Stream};

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Index of the largest entry other than `exclude`; lowest index wins ties.
pub fn argmax_excluding(row: &[f64], exclude: usize) -> usize {
    let mut best: Option<usize> = None;
    for (i, &v) in row.iter().enumerate() {
        if i == exclude {
            continue;
        }
        match best {
            Some(b) if v <= row[b] => {}
            _ => best = Some(i),
        }
    }
    best.unwrap_or(exclude)
}

/// Affine + ReLU stack producing class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    params: ParamSet,
    sizes: Vec<usize>,
    input_kind: InputKind,
    frozen: bool,
}

fn w_name(i: usize) -> String {
    format!("layer{i}.w")
}

fn b_name(i: usize) -> String {
    format!("layer{i}.b")
}

impl Classifier {
    /// He-initialized network with the given hidden widths.
    pub fn new(input_kind: InputKind, hidden: &[usize], classes: usize, seed: u64) -> Self {
        let mut sizes = vec![input_kind.dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(classes);
        let mut rng = substream(seed, Stream::ClassifierInit, 0);
        let mut params = ParamSet::new();
        for i in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            params.insert(w_name(i), Tensor::from_fn([fan_in, fan_out], |_| normal.sample(&mut rng)));
            params.insert(b_name(i), Tensor::zeros([fan_out]));
        }
        Self {
            params,
            sizes,
            input_kind,
            frozen: false,
        }
    }

    /// Rebuilds a classifier from snapshot tensors; the result is frozen.
    pub fn from_params(params: ParamSet, input_kind: InputKind) -> Result<Self> {
        let mut sizes = vec![input_kind.dim()];
        let mut i = 0;
        while let Some(w) = params.get(&w_name(i)) {
            let b = params
                .get(&b_name(i))
                .ok_or_else(|| invalid(format!("missing {}", b_name(i))))?;
            if w.rank() != 2 || w.shape()[0] != *sizes.last().expect("nonempty") || b.numel() != w.shape()[1] {
                return Err(invalid(format!("layer {i} has inconsistent shapes {:?}/{:?}", w.shape(), b.shape())));
            }
            sizes.push(w.shape()[1]);
            i += 1;
        }
        if i == 0 || params.len() != 2 * i {
            return Err(invalid("classifier snapshot has no layers or stray tensors"));
        }
        Ok(Self {
            params,
            sizes,
            input_kind,
            frozen: true,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn input_kind(&self) -> InputKind {
        self.input_kind
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.sizes.last().expect("nonempty")
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Width of the penultimate activation (the input itself for a linear model).
    pub fn feature_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 2]
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.input_dim() {
            return Err(invalid(format!(
                "classifier expects (batch, {}) inputs, got {:?}",
                self.input_dim(),
                s
            )));
        }
        Ok(())
    }

    /// Runs layers `[0, upto)`; ReLU follows every layer except the last one.
    fn run(&self, g: &mut Graph, p: &Bound, x: Var, upto: usize) -> Result<Var> {
        self.check_input(g, x)?;
        let mut h = x;
        for i in 0..upto {
            h = g.affine(h, p.get(&w_name(i)), p.get(&b_name(i)))?;
            if i + 1 < self.num_layers() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn forward_bound(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        self.run(g, p, x, self.num_layers())
    }

    /// Logits with the weights bound as constants: gradients can reach `x`
    /// but never the classifier.
    pub fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let p = self.params.bind_frozen(g);
        self.forward_bound(g, &p, x)
    }

    /// Penultimate activations of `x`, differentiable with respect to `x`.
    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let p = self.params.bind_frozen(g);
        self.run(g, &p, x, self.num_layers() - 1)
    }

    pub fn logits_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.logits(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn extract_features(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.features(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits_values(x)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    pub fn accuracy(&self, ds: &Dataset) -> Result<f64> {
        if ds.is_empty() {
            return Err(NpprError::EmptyDataset);
        }
        let pred = self.predict(&ds.inputs)?;
        let hits = pred.iter().zip(&ds.labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / ds.len() as f64)
    }
}

fn default_hidden() -> Vec<usize> {
    vec![32]
}
fn default_epochs() -> usize {
    200
}
fn default_lr() -> f64 {
    1e-2
}
fn default_batch() -> usize {
    64
}
fn default_threshold() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_threshold")]
    pub accuracy_threshold: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            epochs: default_epochs(),
            lr: default_lr(),
            batch_size: default_batch(),
            accuracy_threshold: default_threshold(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub classifier: Classifier,
    pub train_accuracy: f64,
    pub reached_threshold: bool,
}

/// Fits a classifier with minibatch Adam on cross-entropy, then freezes it.
/// Missing the accuracy threshold is reported, not treated as an error.
pub fn train_classifier(ds: &Dataset, spec: &ClassifierSpec) -> Result<TrainedClassifier> {
    if ds.is_empty() {
        return Err(NpprError::EmptyDataset);
    }
    let mut clf = Classifier::new(ds.kind, &spec.hidden, ds.num_classes, spec.seed);
    let adam = AdamConfig {
        lr: spec.lr,
        ..Default::default()
    };
    let mut state = AdamState::default();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let bs = spec.batch_size.max(1);
    for epoch in 0..spec.epochs {
        let mut rng = substream(spec.seed, Stream::ClassifierShuffle, epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let (x, y) = ds.batch(chunk);
            let mut g = Graph::new();
            let p = clf.params.bind(&mut g);
            let xv = g.constant(x);
            let logits = clf.forward_bound(&mut g, &p, xv)?;
            let lsm = g.log_softmax(logits);
            let picked = g.pick_cols(lsm, &y)?;
            let nll = g.mean(picked);
            let loss = g.scale(nll, -1.0);
            g.backward(loss)?;
            let grads = clf.params.collect_grads(&g, &p);
            adam_step(&mut clf.params, &grads, &mut state, &adam);
        }
    }
    clf.freeze();
    let train_accuracy = clf.accuracy(ds)?;
    let reached_threshold = train_accuracy >= spec.accuracy_threshold;
    if !reached_threshold {
        log::warn!(
            "classifier reached train accuracy {train_accuracy:.4} below threshold {}",
            spec.accuracy_threshold
        );
    }
    Ok(TrainedClassifier {
        classifier: clf,
        train_accuracy,
        reached_threshold,
    })
}
