//! Latent → input-space maps and the L∞ budget squashing.

use std::collections::BTreeMap;
use std::fmt;

use nppr_tensor::{Bound, Graph, ParamSet, Tensor, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::InputKind;
use crate::error::{invalid, NpprError, Result};
use crate::rng::Rng;

/// Cubic convolution kernel with `a = -0.5`.
pub fn bicubic_kernel(a: f64) -> f64 {
    let x = a.abs();
    if x < 1.0 {
        1.5 * x * x * x - 2.5 * x * x + 1.0
    } else if x < 2.0 {
        -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0
    } else {
        0.0
    }
}

/// Source coordinate of output sample `j` under the align-corners convention.
fn source_coord(j: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out <= 1 || n_in <= 1 {
        0.0
    } else {
        j as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

/// `(n_out × n_in)` row-major interpolation matrix with clamp-to-edge taps.
pub fn bicubic_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    for j in 0..n_out {
        let s = source_coord(j, n_in, n_out);
        let i = s.floor();
        let t = s - i;
        for tap in -1i64..=2 {
            let src = (i as i64 + tap).clamp(0, n_in as i64 - 1) as usize;
            m[j * n_in + src] += bicubic_kernel(t - tap as f64);
        }
    }
    m
}

/// Direct 4×4-neighbourhood bicubic resize of one `h_in × w_in` plane.
pub fn bicubic_resize(img: &[f64], h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> Vec<f64> {
    let at = |r: i64, c: i64| -> f64 {
        let r = r.clamp(0, h_in as i64 - 1) as usize;
        let c = c.clamp(0, w_in as i64 - 1) as usize;
        img[r * w_in + c]
    };
    let mut out = Vec::with_capacity(h_out * w_out);
    for y in 0..h_out {
        let sy = source_coord(y, h_in, h_out);
        let (iy, ty) = (sy.floor() as i64, sy - sy.floor());
        for x in 0..w_out {
            let sx = source_coord(x, w_in, w_out);
            let (ix, tx) = (sx.floor() as i64, sx - sx.floor());
            let mut v = 0.0;
            for m in -1i64..=2 {
                for n in -1i64..=2 {
                    v += bicubic_kernel(ty - m as f64) * bicubic_kernel(tx - n as f64) * at(iy + m, ix + n);
                }
            }
            out.push(v);
        }
    }
    out
}

/// `γ·tanh(u)`; every output lies strictly inside `(-γ, γ)`.
pub fn apply_budget(g: &mut Graph, u: Var, gamma: f64) -> Var {
    let t = g.tanh(u);
    g.scale(t, gamma)
}

pub fn apply_budget_values(u: &[f64], gamma: f64) -> Vec<f64> {
    u.iter().map(|v| gamma * v.tanh()).collect()
}

/// L∞ radius, kept as `numerator/denominator` so `"16/255"` survives a
/// round trip through config files.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Radius {
    pub numer: f64,
    pub denom: f64,
}

impl Radius {
    pub fn new(value: f64) -> Self {
        Self { numer: value, denom: 1.0 }
    }

    pub fn ratio(numer: f64, denom: f64) -> Self {
        Self { numer, denom }
    }

    pub fn value(&self) -> f64 {
        self.numer / self.denom
    }

    /// Scales the radius, keeping the denominator.
    pub fn times(&self, k: f64) -> Self {
        Self {
            numer: self.numer * k,
            denom: self.denom,
        }
    }
}

impl fmt::Display for Radius {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.denom == 1.0 {
            write!(f, "{}", self.numer)
        } else {
            write!(f, "{}/{}", self.numer, self.denom)
        }
    }
}

impl std::str::FromStr for Radius {
    type Err = NpprError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let num = |t: &str| -> Result<f64> {
            t.trim()
                .parse::<f64>()
                .map_err(|_| invalid(format!("cannot parse radius `{s}`")))
        };
        match s.split_once('/') {
            Some((a, b)) => Ok(Radius::ratio(num(a)?, num(b)?)),
            None => Ok(Radius::new(num(s)?)),
        }
    }
}

impl Serialize for Radius {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.denom == 1.0 {
            s.serialize_f64(self.numer)
        } else {
            s.serialize_str(&self.to_string())
        }
    }
}

impl<'de> Deserialize<'de> for Radius {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Radius::new(v)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsamplerKind {
    /// Linear premap then separable bicubic interpolation on image grids.
    Bicubic,
    /// Affine map from the latent space to a flat input.
    Linear,
    /// Latent is already input-sized.
    None,
}

impl UpsamplerKind {
    pub fn name(&self) -> &'static str {
        match self {
            UpsamplerKind::Bicubic => "bicubic",
            UpsamplerKind::Linear => "linear",
            UpsamplerKind::None => "none",
        }
    }
}

/// Everything needed to build an [`Upsampler`].
#[derive(Debug, Clone, PartialEq)]
pub struct UpsamplerSpec {
    pub kind: UpsamplerKind,
    pub learnable: bool,
    pub latent_dim: usize,
    /// `(c, h', w')` for bicubic mode.
    pub latent_grid: Option<[usize; 3]>,
    pub target: InputKind,
}

/// Maps `(R, latent_dim)` latents to `(R, input_dim)` pre-budget perturbations.
pub trait Upsampler: Send + Sync + fmt::Debug {
    fn kind(&self) -> UpsamplerKind;
    fn latent_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn learnable(&self) -> bool;
    /// Parameters, all named under `up.`.
    fn init_params(&self, rng: &mut Rng) -> ParamSet;
    fn forward(&self, g: &mut Graph, p: &Bound, latent: Var) -> Result<Var>;
}

fn random_linear(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn([fan_in, fan_out], |_| normal.sample(rng))
}

#[derive(Debug)]
pub struct BicubicUpsampler {
    grid: [usize; 3],
    out_hw: (usize, usize),
    learnable: bool,
    /// `(h'·w', h·w)` transpose of the separable interpolation operator.
    kron_t: Tensor,
}

impl BicubicUpsampler {
    pub fn new(spec: &UpsamplerSpec) -> Result<Self> {
        let InputKind::Image {
            channels,
            height,
            width,
        } = spec.target
        else {
            return Err(invalid("bicubic upsampler needs image-shaped inputs"));
        };
        let grid = spec
            .latent_grid
            .ok_or_else(|| invalid("bicubic upsampler needs upsampler.latent_grid"))?;
        let [c, hl, wl] = grid;
        if c != channels || hl > height || wl > width || hl == 0 || wl == 0 {
            return Err(invalid(format!(
                "latent grid {grid:?} incompatible with image ({channels}, {height}, {width})"
            )));
        }
        if c * hl * wl != spec.latent_dim {
            return Err(invalid(format!(
                "latent grid {grid:?} has {} cells but latent_dim is {}",
                c * hl * wl,
                spec.latent_dim
            )));
        }
        let uh = bicubic_matrix(hl, height);
        let uw = bicubic_matrix(wl, width);
        let (n_in, n_out) = (hl * wl, height * width);
        let kron_t = Tensor::from_fn([n_in, n_out], |idx| {
            let (src, dst) = (idx / n_out, idx % n_out);
            let (i, j) = (src / wl, src % wl);
            let (y, x) = (dst / width, dst % width);
            uh[y * hl + i] * uw[x * wl + j]
        });
        Ok(Self {
            grid,
            out_hw: (height, width),
            learnable: spec.learnable,
            kron_t,
        })
    }
}

impl Upsampler for BicubicUpsampler {
    fn kind(&self) -> UpsamplerKind {
        UpsamplerKind::Bicubic
    }

    fn latent_dim(&self) -> usize {
        self.grid.iter().product()
    }

    fn output_dim(&self) -> usize {
        self.grid[0] * self.out_hw.0 * self.out_hw.1
    }

    fn learnable(&self) -> bool {
        self.learnable
    }

    fn init_params(&self, rng: &mut Rng) -> ParamSet {
        let l = self.latent_dim();
        let mut p = ParamSet::new();
        p.insert("up.premap.w", random_linear(rng, l, l));
        p.insert("up.premap.b", Tensor::zeros([l]));
        p
    }

    fn forward(&self, g: &mut Graph, p: &Bound, latent: Var) -> Result<Var> {
        let rows = g.shape(latent)[0];
        let c = self.grid[0];
        let pre = g.affine(latent, p.get("up.premap.w"), p.get("up.premap.b"))?;
        let planes = g.reshape(pre, &[rows * c, self.grid[1] * self.grid[2]])?;
        let k = g.constant(self.kron_t.clone());
        let up = g.matmul(planes, k)?;
        Ok(g.reshape(up, &[rows, self.output_dim()])?)
    }
}

#[derive(Debug)]
pub struct LinearUpsampler {
    latent_dim: usize,
    output_dim: usize,
    learnable: bool,
}

impl LinearUpsampler {
    pub fn new(spec: &UpsamplerSpec) -> Result<Self> {
        Ok(Self {
            latent_dim: spec.latent_dim,
            output_dim: spec.target.dim(),
            learnable: spec.learnable,
        })
    }
}

impl Upsampler for LinearUpsampler {
    fn kind(&self) -> UpsamplerKind {
        UpsamplerKind::Linear
    }

    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn learnable(&self) -> bool {
        self.learnable
    }

    fn init_params(&self, rng: &mut Rng) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("up.linear.w", random_linear(rng, self.latent_dim, self.output_dim));
        p.insert("up.linear.b", Tensor::zeros([self.output_dim]));
        p
    }

    fn forward(&self, g: &mut Graph, p: &Bound, latent: Var) -> Result<Var> {
        Ok(g.affine(latent, p.get("up.linear.w"), p.get("up.linear.b"))?)
    }
}

#[derive(Debug)]
pub struct IdentityUpsampler {
    dim: usize,
}

impl IdentityUpsampler {
    pub fn new(spec: &UpsamplerSpec) -> Result<Self> {
        if spec.latent_dim != spec.target.dim() {
            return Err(invalid(format!(
                "upsampler `none` needs latent_dim == input dim ({} vs {})",
                spec.latent_dim,
                spec.target.dim()
            )));
        }
        Ok(Self { dim: spec.latent_dim })
    }
}

impl Upsampler for IdentityUpsampler {
    fn kind(&self) -> UpsamplerKind {
        UpsamplerKind::None
    }

    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn learnable(&self) -> bool {
        false
    }

    fn init_params(&self, _rng: &mut Rng) -> ParamSet {
        ParamSet::new()
    }

    fn forward(&self, _g: &mut Graph, _p: &Bound, latent: Var) -> Result<Var> {
        Ok(latent)
    }
}

type UpsamplerCtor = fn(&UpsamplerSpec) -> Result<Box<dyn Upsampler>>;

/// Upsampler constructors keyed by name.
pub struct UpsamplerRegistry {
    ctors: BTreeMap<&'static str, UpsamplerCtor>,
}

impl Default for UpsamplerRegistry {
    fn default() -> Self {
        let mut r = Self { ctors: BTreeMap::new() };
        r.register("bicubic", |s| Ok(Box::new(BicubicUpsampler::new(s)?)));
        r.register("linear", |s| Ok(Box::new(LinearUpsampler::new(s)?)));
        r.register("none", |s| Ok(Box::new(IdentityUpsampler::new(s)?)));
        r
    }
}

impl UpsamplerRegistry {
    pub fn register(&mut self, name: &'static str, ctor: UpsamplerCtor) {
        self.ctors.insert(name, ctor);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.ctors.keys().copied()
    }

    pub fn build(&self, spec: &UpsamplerSpec) -> Result<Box<dyn Upsampler>> {
        let name = spec.kind.name();
        let ctor = self.ctors.get(name).ok_or_else(|| NpprError::UnknownStrategy {
            kind: "upsampler",
            name: name.to_string(),
        })?;
        ctor(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert_eq!(bicubic_kernel(0.0), 1.0);
        assert_eq!(bicubic_kernel(1.0), 0.0);
        assert_eq!(bicubic_kernel(-1.0), 0.0);
        assert_eq!(bicubic_kernel(2.0), 0.0);
        assert_eq!(bicubic_kernel(0.5), 0.5625);
        assert_eq!(bicubic_kernel(3.7), 0.0);
    }

    #[test]
    fn matrix_matches_direct_resize() {
        let img: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 - 1.3).collect();
        let direct = bicubic_resize(&img, 3, 4, 7, 9);
        let uh = bicubic_matrix(3, 7);
        let uw = bicubic_matrix(4, 9);
        for y in 0..7 {
            for x in 0..9 {
                let mut v = 0.0;
                for i in 0..3 {
                    for j in 0..4 {
                        v += uh[y * 3 + i] * uw[x * 4 + j] * img[i * 4 + j];
                    }
                }
                assert!((v - direct[y * 9 + x]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_size_is_identity() {
        let img: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        assert_eq!(bicubic_resize(&img, 4, 5, 4, 5), img);
    }

    #[test]
    fn budget_values() {
        assert_eq!(apply_budget_values(&[0.0], 0.1), vec![0.0]);
        let g = 16.0 / 255.0;
        let v = apply_budget_values(&[10.0], g)[0];
        assert!(v < g && (v - g * 10f64.tanh()).abs() < 1e-18);
    }

    #[test]
    fn radius_parses_fraction_exactly() {
        let r: Radius = "16/255".parse().unwrap();
        assert_eq!(r.value(), 16.0 / 255.0);
        assert_eq!(r.to_string(), "16/255");
        assert_eq!("0.25".parse::<Radius>().unwrap().value(), 0.25);
        assert!("a/b".parse::<Radius>().is_err());
    }

    #[test]
    fn identity_requires_matching_dims() {
        let spec = UpsamplerSpec {
            kind: UpsamplerKind::None,
            learnable: false,
            latent_dim: 3,
            latent_grid: None,
            target: InputKind::Flat { dim: 4 },
        };
        assert!(UpsamplerRegistry::default().build(&spec).is_err());
    }
}
