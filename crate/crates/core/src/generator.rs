//! The perturbation generator: mixture head, sampler, upsampler and budget.

use nppr_tensor::{Bound, Graph, ParamSet, Tensor, Var};

use crate::error::{invalid, Result};
use crate::gmm::{repeat_index, sample_exact_row, sample_perturbations_with_noise, GmmParams, GmmVars, Noise, RelaxedSample, Temperatures};
use crate::metrics::margin_loss;
use crate::models::{Classifier, Conditioning, DependencyMode, GmmHead, HeadConfig, HeadContext, HeadRegistry};
use crate::rng::{substream, Rng, Stream};
use crate::upsample::{apply_budget, Upsampler, UpsamplerRegistry, UpsamplerSpec};

#[derive(Debug)]
pub struct Generator {
    head_cfg: HeadConfig,
    up_spec: UpsamplerSpec,
    head: Box<dyn GmmHead>,
    up: Box<dyn Upsampler>,
    ctx: HeadContext,
    params: ParamSet,
    gamma: f64,
    /// Temperatures applied by the heads; advanced by the trainer.
    pub temps: Temperatures,
}

/// Relaxed training sample pushed through the whole pipeline.
#[derive(Debug, Clone)]
pub struct RelaxedPerturbations {
    pub gmm: GmmVars,
    pub sample: RelaxedSample,
    /// `(B·M, d)` budget-constrained perturbations.
    pub delta: Var,
}

impl Generator {
    pub fn new(
        head_cfg: &HeadConfig,
        up_spec: &UpsamplerSpec,
        gamma: f64,
        clf: &Classifier,
        temps: Temperatures,
        seed: u64,
    ) -> Result<Self> {
        head_cfg.validate()?;
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(invalid(format!("budget radius must be positive, got {gamma}")));
        }
        if up_spec.latent_dim != head_cfg.latent_dim {
            return Err(invalid(format!(
                "upsampler latent_dim {} differs from gmm.latent_dim {}",
                up_spec.latent_dim, head_cfg.latent_dim
            )));
        }
        if up_spec.target.dim() != clf.input_dim() {
            return Err(invalid(format!(
                "upsampler targets {} inputs, classifier takes {}",
                up_spec.target.dim(),
                clf.input_dim()
            )));
        }
        let head = HeadRegistry::default().build(head_cfg)?;
        let up = UpsamplerRegistry::default().build(up_spec)?;
        let ctx = HeadContext {
            feature_dim: clf.feature_dim(),
            num_classes: clf.num_classes(),
        };
        let mut rng = substream(seed, Stream::GeneratorInit, 0);
        let mut params = head.init_params(ctx, &temps, &mut rng);
        let mut up_rng = substream(seed, Stream::GeneratorInit, 1);
        for (k, v) in up.init_params(&mut up_rng).iter() {
            params.insert(k.clone(), v.clone());
        }
        Ok(Self {
            head_cfg: head_cfg.clone(),
            up_spec: up_spec.clone(),
            head,
            up,
            ctx,
            params,
            gamma,
            temps,
        })
    }

    pub fn mode(&self) -> DependencyMode {
        self.head.mode()
    }

    pub fn head_config(&self) -> &HeadConfig {
        &self.head_cfg
    }

    pub fn upsampler_spec(&self) -> &UpsamplerSpec {
        &self.up_spec
    }

    pub fn context(&self) -> HeadContext {
        self.ctx
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn input_dim(&self) -> usize {
        self.up.output_dim()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces the parameters; names and shapes must match.
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        self.params.check_compatible(&params)?;
        self.params = params;
        Ok(())
    }

    /// Head parameters always train; upsampler ones only when learnable.
    pub fn is_trainable(&self, name: &str) -> bool {
        !name.starts_with("up.") || self.up.learnable()
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.params.bind_with(g, |n| self.is_trainable(n))
    }

    /// Mixture parameters for a batch of inputs on `g`.
    pub fn mixture_vars(&self, g: &mut Graph, p: &Bound, clf: &Classifier, x: &Tensor, labels: &[usize]) -> Result<GmmVars> {
        let batch = x.shape()[0];
        if labels.len() != batch {
            return Err(invalid(format!("{} labels for {batch} inputs", labels.len())));
        }
        let features = if self.mode().needs_features() {
            Some(g.constant(clf.extract_features(x)?))
        } else {
            None
        };
        let cond = Conditioning {
            batch,
            features,
            labels: Some(labels),
        };
        self.head.forward(g, p, &cond, &self.temps)
    }

    /// Mixture parameter values for a batch of inputs.
    pub fn mixture(&self, clf: &Classifier, x: &Tensor, labels: &[usize]) -> Result<GmmParams> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let v = self.mixture_vars(&mut g, &p, clf, x, labels)?;
        Ok(GmmParams::from_vars(&g, &v))
    }

    /// Latents `(R, L)` to input-space perturbations `(R, d)` on `g`.
    pub fn decode(&self, g: &mut Graph, p: &Bound, latent: Var) -> Result<Var> {
        let u = self.up.forward(g, p, latent)?;
        Ok(apply_budget(g, u, self.gamma))
    }

    /// Latent values to perturbation values.
    pub fn decode_values(&self, latent: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let l = g.constant(latent.clone());
        let d = self.decode(&mut g, &p, l)?;
        Ok(g.value(d).clone())
    }

    /// Relaxed samples for training, with the noise supplied.
    pub fn relaxed(&self, g: &mut Graph, p: &Bound, gmm: GmmVars, m: usize, noise: Noise) -> Result<RelaxedPerturbations> {
        let sample = sample_perturbations_with_noise(g, &gmm, m, self.temps.tau, noise)?;
        let delta = self.decode(g, p, sample.latent)?;
        Ok(RelaxedPerturbations { gmm, sample, delta })
    }

    /// Mean margin loss of `M` relaxed perturbations per input: the
    /// training objective.
    #[allow(clippy::too_many_arguments)]
    pub fn margin_objective(
        &self,
        g: &mut Graph,
        p: &Bound,
        clf: &Classifier,
        x: &Tensor,
        labels: &[usize],
        m: usize,
        kappa: f64,
        noise: Noise,
    ) -> Result<Var> {
        let b = x.shape()[0];
        let gmm = self.mixture_vars(g, p, clf, x, labels)?;
        let rel = self.relaxed(g, p, gmm, m, noise)?;
        let rep = repeat_index(b, m);
        let xr = g.constant(x.clone());
        let xr = g.gather_rows(xr, &rep)?;
        let xp = g.add(xr, rel.delta)?;
        let logits = clf.logits(g, xp)?;
        let yr: Vec<usize> = rep.iter().map(|&i| labels[i]).collect();
        margin_loss(g, logits, &yr, kappa)
    }

    /// Exact draws for row `b` of a precomputed mixture: `(M, d)` perturbations.
    pub fn sample_row(&self, gmm: &GmmParams, b: usize, m: usize, rng: &mut Rng) -> Result<Tensor> {
        let (latent, _, _) = sample_exact_row(gmm, b, m, rng);
        self.decode_values(&Tensor::new([m, gmm.latent_dim()], latent)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::InputKind;
    use crate::upsample::UpsamplerKind;

    fn setup(kind: UpsamplerKind, learnable: bool) -> (Classifier, Generator) {
        let input = InputKind::Flat { dim: 4 };
        let clf = Classifier::new(input, &[6], 3, 1);
        let head = HeadConfig {
            mode: DependencyMode::JointDep,
            k: 2,
            latent_dim: if kind == UpsamplerKind::None { 4 } else { 2 },
            hidden_dim: 5,
            label_emb_dim: 3,
            label_emb_norm: true,
        };
        let up = UpsamplerSpec {
            kind,
            learnable,
            latent_dim: head.latent_dim,
            latent_grid: None,
            target: input,
        };
        let gen = Generator::new(&head, &up, 0.1, &clf, Temperatures::UNIT, 7).unwrap();
        (clf, gen)
    }

    #[test]
    fn frozen_upsampler_params_do_not_train() {
        let (_, gen) = setup(UpsamplerKind::Linear, false);
        assert!(!gen.is_trainable("up.linear.w"));
        assert!(gen.is_trainable("head.mu.w"));
        let (_, gen) = setup(UpsamplerKind::Linear, true);
        assert!(gen.is_trainable("up.linear.w"));
    }

    #[test]
    fn exact_samples_respect_budget_and_seed() {
        let (clf, gen) = setup(UpsamplerKind::Linear, false);
        let x = Tensor::from_fn([3, 4], |i| i as f64 * 0.3);
        let gmm = gen.mixture(&clf, &x, &[0, 1, 2]).unwrap();
        let a = gen.sample_row(&gmm, 1, 50, &mut substream(1, Stream::Eval, 0)).unwrap();
        let b = gen.sample_row(&gmm, 1, 50, &mut substream(1, Stream::Eval, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[50, 4]);
        assert!(a.max_abs() < 0.1);
    }

    #[test]
    fn identity_upsampler_needs_matching_dims() {
        let (_, gen) = setup(UpsamplerKind::None, false);
        assert_eq!(gen.input_dim(), 4);
    }

    #[test]
    fn rejects_bad_radius() {
        let input = InputKind::Flat { dim: 4 };
        let clf = Classifier::new(input, &[6], 3, 1);
        let head = HeadConfig::default();
        let up = UpsamplerSpec {
            kind: UpsamplerKind::Linear,
            learnable: false,
            latent_dim: head.latent_dim,
            latent_grid: None,
            target: input,
        };
        assert!(Generator::new(&head, &up, 0.0, &clf, Temperatures::UNIT, 0).is_err());
    }
}
