//! Monte-Carlo robustness estimators and L∞ attacks.
//!
//! Every estimator draws the randomness for input `i` from its own substream,
//! so counts do not depend on how rayon splits the work.

use nppr_tensor::{Graph, Tensor};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, NpprError, Result};
use crate::generator::Generator;
use crate::gmm::GmmParams;
use crate::metrics::loss::{cross_entropy_terms, margin_terms};
use crate::models::{argmax, Classifier};
use crate::rng::{substream, Rng, Stream};

/// Inputs per attack batch.
const ATTACK_CHUNK: usize = 64;

/// A binomial proportion with its counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub successes: u64,
    pub draws: u64,
}

impl Estimate {
    pub fn from_counts(successes: u64, draws: u64) -> Self {
        Self {
            value: if draws == 0 { 0.0 } else { successes as f64 / draws as f64 },
            successes,
            draws,
        }
    }

    pub fn variance(&self) -> f64 {
        if self.draws == 0 {
            return 0.0;
        }
        self.value * (1.0 - self.value) / self.draws as f64
    }

    /// `3·sqrt(p(1−p)/n)`.
    pub fn half_width(&self) -> f64 {
        3.0 * self.variance().sqrt()
    }
}

/// Three-sigma half-width of the difference of two independent estimates.
pub fn difference_half_width(a: &Estimate, b: &Estimate) -> f64 {
    3.0 * (a.variance() + b.variance()).sqrt()
}

/// A perturbation distribution supported in the L∞ ball.
pub trait PerturbationLaw: Sync {
    fn name(&self) -> &'static str;
    /// `(m, d)` perturbations for input `i`.
    fn sample(&self, i: usize, m: usize, rng: &mut Rng) -> Result<Tensor>;
}

/// Uniform on `[−γ, γ]^d`.
#[derive(Debug, Clone, Copy)]
pub struct UniformBall {
    pub gamma: f64,
    pub dim: usize,
}

impl PerturbationLaw for UniformBall {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn sample(&self, _i: usize, m: usize, rng: &mut Rng) -> Result<Tensor> {
        let g = self.gamma;
        Ok(Tensor::from_fn([m, self.dim], |_| g * (2.0 * rng.random::<f64>() - 1.0)))
    }
}

/// Zero-mean Gaussian with each coordinate clipped into `[−γ, γ]`.
#[derive(Debug, Clone, Copy)]
pub struct ClippedGaussian {
    pub gamma: f64,
    pub sigma: f64,
    pub dim: usize,
}

impl PerturbationLaw for ClippedGaussian {
    fn name(&self) -> &'static str {
        "clipped_gaussian"
    }

    fn sample(&self, _i: usize, m: usize, rng: &mut Rng) -> Result<Tensor> {
        let n = Normal::new(0.0, self.sigma).map_err(|e| invalid(format!("gaussian sigma: {e}")))?;
        let g = self.gamma;
        Ok(Tensor::from_fn([m, self.dim], |_| n.sample(rng).clamp(-g, g)))
    }
}

/// Exact draws from a trained generator; row `i` of `mixture` belongs to input `i`.
pub struct LearnedLaw<'a> {
    pub generator: &'a Generator,
    pub mixture: GmmParams,
}

impl PerturbationLaw for LearnedLaw<'_> {
    fn name(&self) -> &'static str {
        "learned"
    }

    fn sample(&self, i: usize, m: usize, rng: &mut Rng) -> Result<Tensor> {
        self.generator.sample_row(&self.mixture, i, m, rng)
    }
}

/// Baseline perturbation laws, sized from `γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "law")]
pub enum BaselineLaw {
    Uniform,
    ClippedGaussian { sigma: f64 },
}

impl BaselineLaw {
    pub fn build(&self, gamma: f64, dim: usize) -> Box<dyn PerturbationLaw> {
        match *self {
            BaselineLaw::Uniform => Box::new(UniformBall { gamma, dim }),
            BaselineLaw::ClippedGaussian { sigma } => Box::new(ClippedGaussian { gamma, sigma, dim }),
        }
    }
}

/// Fraction of `(input, draw)` pairs still classified correctly.
pub fn mc_accuracy(clf: &Classifier, ds: &Dataset, law: &dyn PerturbationLaw, m: usize, seed: u64) -> Result<Estimate> {
    if ds.is_empty() {
        return Err(NpprError::EmptyDataset);
    }
    if m == 0 {
        return Err(invalid("samples per input must be at least 1"));
    }
    let d = ds.dim();
    let counts = (0..ds.len())
        .into_par_iter()
        .map(|i| -> Result<u64> {
            let mut rng = substream(seed, Stream::Eval, i as u64);
            let delta = law.sample(i, m, &mut rng)?;
            if delta.shape() != [m, d] {
                return Err(invalid(format!("law {} gave shape {:?}", law.name(), delta.shape())));
            }
            let x = ds.input(i);
            let pert = Tensor::from_fn([m, d], |k| x[k % d] + delta.data()[k]);
            let pred = clf.predict(&pert)?;
            Ok(pred.iter().filter(|&&p| p == ds.labels[i]).count() as u64)
        })
        .collect::<Result<Vec<u64>>>()?;
    Ok(Estimate::from_counts(counts.iter().sum(), (ds.len() * m) as u64))
}

/// NPPR of a generator: exact mixture draws, 0-1 correctness.
pub fn nppr_estimate(clf: &Classifier, generator: &Generator, ds: &Dataset, m: usize, seed: u64) -> Result<Estimate> {
    if ds.is_empty() {
        return Err(NpprError::EmptyDataset);
    }
    let mixture = generator.mixture(clf, &ds.inputs, &ds.labels)?;
    let law = LearnedLaw { generator, mixture };
    mc_accuracy(clf, ds, &law, m, seed)
}

/// PR under a fixed baseline law.
pub fn pr_estimate(clf: &Classifier, ds: &Dataset, law: BaselineLaw, gamma: f64, m: usize, seed: u64) -> Result<Estimate> {
    if !(gamma >= 0.0) {
        return Err(invalid(format!("budget radius must be non-negative, got {gamma}")));
    }
    let law = law.build(gamma, ds.dim());
    mc_accuracy(clf, ds, law.as_ref(), m, seed)
}

/// Objective an attack ascends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    /// Increase cross-entropy.
    CrossEntropy,
    /// Decrease the softplus logit margin.
    Margin { kappa: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub gamma: f64,
    pub steps: usize,
    /// Defaults to `2.5·γ/steps`.
    pub step_size: Option<f64>,
    pub loss: AttackLoss,
    pub random_start: bool,
}

impl AttackConfig {
    pub fn pgd(gamma: f64, steps: usize) -> Self {
        Self {
            gamma,
            steps,
            step_size: None,
            loss: AttackLoss::CrossEntropy,
            random_start: true,
        }
    }

    pub fn cw(gamma: f64, steps: usize, kappa: f64) -> Self {
        Self {
            loss: AttackLoss::Margin { kappa },
            ..Self::pgd(gamma, steps)
        }
    }
}

/// Per-input outcome of an attack.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    /// Fraction of inputs never misclassified along the attack path.
    pub robust: Estimate,
    /// A misclassifying offset for each broken input.
    pub adversarial: Vec<Option<Vec<f64>>>,
}

fn attack_chunk(clf: &Classifier, ds: &Dataset, idx: &[usize], cfg: &AttackConfig, seed: u64) -> Result<Vec<Option<Vec<f64>>>> {
    let d = ds.dim();
    let (x, y) = ds.batch(idx);
    let g0 = cfg.gamma;
    let alpha = cfg.step_size.unwrap_or(2.5 * g0 / cfg.steps as f64);
    let mut delta = vec![0.0; idx.len() * d];
    if cfg.random_start && g0 > 0.0 {
        for (r, &i) in idx.iter().enumerate() {
            let mut rng = substream(seed, Stream::Attack, i as u64);
            for v in &mut delta[r * d..(r + 1) * d] {
                *v = g0 * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
    }
    let mut found: Vec<Option<Vec<f64>>> = vec![None; idx.len()];
    let clean = clf.predict(&x)?;
    for r in 0..idx.len() {
        if clean[r] != y[r] {
            found[r] = Some(vec![0.0; d]);
        }
    }
    for step in 0..=cfg.steps {
        let xp = Tensor::from_fn([idx.len(), d], |k| x.data()[k] + delta[k]);
        let mut g = Graph::new();
        let xv = g.leaf(xp, true);
        let logits = clf.logits(&mut g, xv)?;
        let lv = g.value(logits);
        for r in 0..idx.len() {
            if found[r].is_none() && argmax(lv.row(r)) != y[r] {
                found[r] = Some(delta[r * d..(r + 1) * d].to_vec());
            }
        }
        if step == cfg.steps || g0 == 0.0 {
            break;
        }
        let objective = match cfg.loss {
            AttackLoss::CrossEntropy => cross_entropy_terms(&mut g, logits, &y)?,
            AttackLoss::Margin { kappa } => {
                let t = margin_terms(&mut g, logits, &y, kappa)?;
                g.scale(t, -1.0)
            }
        };
        let total = g.sum(objective);
        g.backward(total)?;
        let grad = g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros([idx.len(), d]));
        for (v, gr) in delta.iter_mut().zip(grad.data()) {
            let s = if *gr > 0.0 {
                1.0
            } else if *gr < 0.0 {
                -1.0
            } else {
                0.0
            };
            *v = (*v + alpha * s).clamp(-g0, g0);
        }
    }
    Ok(found)
}

/// L∞ sign-gradient attack with projection; every iterate is checked.
pub fn attack(clf: &Classifier, ds: &Dataset, cfg: &AttackConfig, seed: u64) -> Result<AttackOutcome> {
    if ds.is_empty() {
        return Err(NpprError::EmptyDataset);
    }
    if cfg.steps == 0 {
        return Err(invalid("attack needs at least one step"));
    }
    if !(cfg.gamma >= 0.0) {
        return Err(invalid(format!("budget radius must be non-negative, got {}", cfg.gamma)));
    }
    let order: Vec<usize> = (0..ds.len()).collect();
    let chunks: Vec<&[usize]> = order.chunks(ATTACK_CHUNK).collect();
    let parts = chunks
        .par_iter()
        .map(|idx| attack_chunk(clf, ds, idx, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    let adversarial: Vec<Option<Vec<f64>>> = parts.into_iter().flatten().collect();
    let robust = adversarial.iter().filter(|a| a.is_none()).count() as u64;
    Ok(AttackOutcome {
        robust: Estimate::from_counts(robust, ds.len() as u64),
        adversarial,
    })
}

/// Fraction of inputs surviving PGD on cross-entropy.
pub fn ar_pgd(clf: &Classifier, ds: &Dataset, gamma: f64, steps: usize, seed: u64) -> Result<Estimate> {
    Ok(attack(clf, ds, &AttackConfig::pgd(gamma, steps), seed)?.robust)
}

/// Fraction of inputs surviving the same iteration on the margin objective.
pub fn ar_cw(clf: &Classifier, ds: &Dataset, gamma: f64, steps: usize, kappa: f64, seed: u64) -> Result<Estimate> {
    Ok(attack(clf, ds, &AttackConfig::cw(gamma, steps, kappa), seed)?.robust)
}

/// Unperturbed accuracy as an estimate over `N` draws.
pub fn clean_accuracy(clf: &Classifier, ds: &Dataset) -> Result<Estimate> {
    if ds.is_empty() {
        return Err(NpprError::EmptyDataset);
    }
    let pred = clf.predict(&ds.inputs)?;
    let hits = pred.iter().zip(&ds.labels).filter(|(p, y)| p == y).count();
    Ok(Estimate::from_counts(hits as u64, ds.len() as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::InputKind;
    use nppr_tensor::ParamSet;

    /// Two-class linear model predicting class 1 iff `w·x + b > 0`.
    pub(crate) fn linear(w: &[f64], b: f64) -> Classifier {
        let d = w.len();
        let mut p = ParamSet::new();
        p.insert("layer0.w", Tensor::from_fn([d, 2], |k| if k % 2 == 1 { w[k / 2] } else { 0.0 }));
        p.insert("layer0.b", Tensor::new([2], vec![0.0, b]).unwrap());
        Classifier::from_params(p, InputKind::Flat { dim: d }).unwrap()
    }

    fn point(x: &[f64], y: usize) -> Dataset {
        Dataset::new(
            Tensor::new([1, x.len()], x.to_vec()).unwrap(),
            vec![y],
            2,
            InputKind::Flat { dim: x.len() },
        )
        .unwrap()
    }

    #[test]
    fn uniform_threshold_quarter() {
        let clf = linear(&[1.0], 0.0);
        let ds = point(&[0.5], 1);
        let e = pr_estimate(&clf, &ds, BaselineLaw::Uniform, 1.0, 10_000, 3).unwrap();
        assert!((e.value - 0.75).abs() < 0.02, "{}", e.value);
    }

    #[test]
    fn degenerate_radius_is_clean_accuracy() {
        let clf = linear(&[1.0, -1.0], 0.1);
        let ds = Dataset::new(
            Tensor::new([3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap(),
            vec![1, 0, 0],
            2,
            InputKind::Flat { dim: 2 },
        )
        .unwrap();
        let clean = clean_accuracy(&clf, &ds).unwrap().value;
        for law in [BaselineLaw::Uniform, BaselineLaw::ClippedGaussian { sigma: 1e-9 / 3.0 }] {
            assert_eq!(pr_estimate(&clf, &ds, law, 1e-9, 100, 1).unwrap().value, clean);
        }
        assert_eq!(ar_pgd(&clf, &ds, 0.0, 20, 1).unwrap().value, clean);
        assert_eq!(ar_cw(&clf, &ds, 0.0, 20, 1.0, 1).unwrap().value, clean);
    }

    #[test]
    fn pgd_matches_linear_margin() {
        // margin y·(w·x+b) = 0.3, γ‖w‖₁ = 3γ
        let clf = linear(&[1.0, -2.0], 0.0);
        let ds = point(&[0.3, 0.0], 1);
        assert_eq!(ar_pgd(&clf, &ds, 0.09, 20, 1).unwrap().value, 1.0);
        assert_eq!(ar_pgd(&clf, &ds, 0.11, 20, 1).unwrap().value, 0.0);
        assert_eq!(ar_cw(&clf, &ds, 0.11, 20, 1.0, 1).unwrap().value, 0.0);
    }

    #[test]
    fn independent_of_thread_count() {
        let clf = linear(&[1.0, 1.0], -0.2);
        let inputs = Tensor::from_fn([40, 2], |k| ((k * 37 % 17) as f64) / 17.0 - 0.3);
        let labels = (0..40).map(|i| i % 2).collect();
        let ds = Dataset::new(inputs, labels, 2, InputKind::Flat { dim: 2 }).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| pr_estimate(&clf, &ds, BaselineLaw::Uniform, 0.3, 50, 9).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn empty_dataset_rejected() {
        let clf = linear(&[1.0], 0.0);
        let ds = Dataset {
            inputs: Tensor::zeros([0, 1]),
            labels: vec![],
            num_classes: 2,
            kind: InputKind::Flat { dim: 1 },
        };
        assert!(matches!(
            pr_estimate(&clf, &ds, BaselineLaw::Uniform, 0.1, 10, 0),
            Err(NpprError::EmptyDataset)
        ));
    }

    struct Flipped<L>(L);

    impl<L: PerturbationLaw> PerturbationLaw for Flipped<L> {
        fn name(&self) -> &'static str {
            "flipped"
        }
        fn sample(&self, i: usize, m: usize, rng: &mut Rng) -> Result<Tensor> {
            Ok(self.0.sample(i, m, rng)?.map(|v| -v))
        }
    }

    #[test]
    fn sign_flip_symmetry() {
        // |x| < 0.4 region classifier is symmetric about 0
        let mut p = ParamSet::new();
        p.insert("layer0.w", Tensor::new([1, 2], vec![1.0, -1.0]).unwrap());
        p.insert("layer0.b", Tensor::new([2], vec![0.0, 0.0]).unwrap());
        p.insert("layer1.w", Tensor::new([2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
        p.insert("layer1.b", Tensor::new([2], vec![0.0, -0.4]).unwrap());
        let clf = Classifier::from_params(p, InputKind::Flat { dim: 1 }).unwrap();
        let ds = point(&[0.0], 0);
        let law = UniformBall { gamma: 1.0, dim: 1 };
        let a = mc_accuracy(&clf, &ds, &law, 2000, 4).unwrap();
        let b = mc_accuracy(&clf, &ds, &Flipped(law), 2000, 4).unwrap();
        assert_eq!(a, b);
        assert!((a.value - 0.4).abs() < 0.05);
    }
}
