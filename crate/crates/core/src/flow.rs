//! Affine-coupling normalizing flow mapping adapted features to a standard
//! normal base distribution.
//!
//! Each block permutes its input, keeps the leading half (passive) and maps the
//! trailing half (active) as `a · exp(ŝ) + t`, where `(s, t)` come from a
//! two-layer ReLU subnet of the passive half and `ŝ = α·tanh(s/α)`. The block
//! output is un-permuted so that a block with a zero subnet is the identity.

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub const DEFAULT_BLOCKS: usize = 8;
pub const DEFAULT_HIDDEN: usize = 256;
pub const DEFAULT_CLAMP: f64 = 1.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("dimension must be even (got {0})")]
    OddDimension(usize),
    #[error("invalid flow configuration: {0}")]
    Config(String),
    #[error("input has {got} dimensions, flow expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("flow overflow: non-finite value in block {block}")]
    Overflow { block: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub dim: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub clamp: f64,
}

impl FlowConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            blocks: DEFAULT_BLOCKS,
            hidden: DEFAULT_HIDDEN,
            clamp: DEFAULT_CLAMP,
        }
    }

    fn validate(&self) -> Result<(), FlowError> {
        if self.dim < 2 || self.dim % 2 != 0 {
            return Err(FlowError::OddDimension(self.dim));
        }
        if self.blocks == 0 {
            return Err(FlowError::Config("at least one block is required".into()));
        }
        if self.hidden == 0 {
            return Err(FlowError::Config("hidden width must be positive".into()));
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return Err(FlowError::Config("clamp must be positive".into()));
        }
        Ok(())
    }
}

/// One affine coupling block with its input permutation.
///
/// `w1`: `hidden × dim/2`, `w2`: `dim × hidden`. The first `dim/2` subnet
/// outputs are the raw log-scales, the rest the translations.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock {
    pub permutation: Vec<usize>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl CouplingBlock {
    fn permute(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.select(Axis(1), &self.permutation)
    }

    fn unpermute(&self, y: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(y.raw_dim());
        for (i, &p) in self.permutation.iter().enumerate() {
            out.column_mut(p).assign(&y.column(i));
        }
        out
    }

    fn subnet(&self, passive: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let pre = passive.dot(&self.w1.t()) + &self.b1;
        let hidden = pre.mapv(|v| v.max(0.0));
        let out = hidden.dot(&self.w2.t()) + &self.b2;
        (pre, hidden, out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowParams {
    pub dim: usize,
    pub hidden: usize,
    pub clamp: f64,
    pub blocks: Vec<CouplingBlock>,
}

/// Intermediate values of one block, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    passive: Array2<f64>,
    active: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
    raw_scale: Array2<f64>,
    scale: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrad {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl FlowParams {
    pub fn init(config: &FlowConfig, seed: u64) -> Result<Self, FlowError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(config, &mut rng)
    }

    /// First-layer weights are `N(0, 1/fan_in)`; the output layer starts at
    /// zero so the initial flow is exactly the identity.
    pub fn init_with_rng(config: &FlowConfig, rng: &mut ChaCha8Rng) -> Result<Self, FlowError> {
        config.validate()?;
        let half = config.dim / 2;
        let normal = Normal::new(0.0, (1.0 / half as f64).sqrt()).unwrap();
        let blocks = (0..config.blocks)
            .map(|_| {
                let mut permutation: Vec<usize> = (0..config.dim).collect();
                permutation.shuffle(rng);
                CouplingBlock {
                    permutation,
                    w1: Array2::from_shape_simple_fn((config.hidden, half), || normal.sample(rng)),
                    b1: Array1::zeros(config.hidden),
                    w2: Array2::zeros((config.dim, config.hidden)),
                    b2: Array1::zeros(config.dim),
                }
            })
            .collect();
        Ok(Self {
            dim: config.dim,
            hidden: config.hidden,
            clamp: config.clamp,
            blocks,
        })
    }

    /// Overwrites every subnet weight and bias with `U(-scale, scale)` draws.
    /// Breaks the identity start; used for checks that need a generic flow.
    pub fn randomize_subnets(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = rand_distr::Uniform::new_inclusive(-scale, scale);
        for b in &mut self.blocks {
            for v in b
                .w1
                .iter_mut()
                .chain(b.b1.iter_mut())
                .chain(b.w2.iter_mut())
                .chain(b.b2.iter_mut())
            {
                *v = dist.sample(&mut rng);
            }
        }
    }

    pub fn config(&self) -> FlowConfig {
        FlowConfig {
            dim: self.dim,
            blocks: self.blocks.len(),
            hidden: self.hidden,
            clamp: self.clamp,
        }
    }

    /// Checks structural invariants of parameters that did not come from `init`.
    pub fn validate(&self) -> Result<(), FlowError> {
        self.config().validate()?;
        let half = self.dim / 2;
        for (k, b) in self.blocks.iter().enumerate() {
            let mut seen = vec![false; self.dim];
            if b.permutation.len() != self.dim {
                return Err(FlowError::Config(format!("block {k}: permutation length")));
            }
            for &p in &b.permutation {
                if p >= self.dim || std::mem::replace(&mut seen[p], true) {
                    return Err(FlowError::Config(format!("block {k}: not a permutation")));
                }
            }
            if b.w1.dim() != (self.hidden, half)
                || b.b1.len() != self.hidden
                || b.w2.dim() != (self.dim, self.hidden)
                || b.b2.len() != self.dim
            {
                return Err(FlowError::Config(format!("block {k}: subnet shape")));
            }
            let finite = |a: &[f64]| a.iter().all(|v| v.is_finite());
            if !(finite(b.w1.as_slice().unwrap())
                && finite(b.b1.as_slice().unwrap())
                && finite(b.w2.as_slice().unwrap())
                && finite(b.b2.as_slice().unwrap()))
            {
                return Err(FlowError::Config(format!("block {k}: non-finite weight")));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<(), FlowError> {
        if x.ncols() != self.dim {
            return Err(FlowError::InputDim {
                expected: self.dim,
                got: x.ncols(),
            });
        }
        Ok(())
    }

    fn soft_clamp(&self, s: &Array2<f64>) -> Array2<f64> {
        let a = self.clamp;
        s.mapv(|v| a * (v / a).tanh())
    }

    /// Batch `u = g⁻¹(z)` and per-row `log|det J|`.
    pub fn forward_batch(&self, z: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>), FlowError> {
        let (u, logdet, _) = self.run_forward(z, false)?;
        Ok((u, logdet))
    }

    pub fn forward_with_cache(
        &self,
        z: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array1<f64>, ForwardCache), FlowError> {
        let (u, logdet, cache) = self.run_forward(z, true)?;
        Ok((u, logdet, ForwardCache { blocks: cache }))
    }

    fn run_forward(
        &self,
        z: ArrayView2<f64>,
        keep: bool,
    ) -> Result<(Array2<f64>, Array1<f64>, Vec<BlockCache>), FlowError> {
        self.check_input(&z)?;
        let half = self.dim / 2;
        let mut x = z.to_owned();
        let mut logdet = Array1::zeros(z.nrows());
        let mut caches = Vec::new();
        for (k, block) in self.blocks.iter().enumerate() {
            let xp = block.permute(x.view());
            let passive = xp.slice(s![.., ..half]);
            let active = xp.slice(s![.., half..]);
            let (pre, hidden, out) = block.subnet(passive);
            let raw_scale = out.slice(s![.., ..half]).to_owned();
            let shift = out.slice(s![.., half..]);
            let scale = self.soft_clamp(&raw_scale);
            let mapped = &active * &scale.mapv(f64::exp) + &shift;
            logdet += &scale.sum_axis(Axis(1));
            let mut yp = xp.clone();
            yp.slice_mut(s![.., half..]).assign(&mapped);
            x = block.unpermute(yp.view());
            if x.iter().any(|v| !v.is_finite()) {
                return Err(FlowError::Overflow { block: k });
            }
            if keep {
                caches.push(BlockCache {
                    passive: passive.to_owned(),
                    active: active.to_owned(),
                    pre,
                    hidden,
                    raw_scale,
                    scale,
                });
            }
        }
        Ok((x, logdet, caches))
    }

    pub fn forward(&self, z: ArrayView1<f64>) -> Result<(Array1<f64>, f64), FlowError> {
        let (u, ld) = self.forward_batch(z.insert_axis(Axis(0)))?;
        Ok((u.row(0).to_owned(), ld[0]))
    }

    /// Batch `z = g(u)`, undoing the blocks in reverse order.
    pub fn inverse_batch(&self, u: ArrayView2<f64>) -> Result<Array2<f64>, FlowError> {
        self.check_input(&u)?;
        let half = self.dim / 2;
        let mut y = u.to_owned();
        for (k, block) in self.blocks.iter().enumerate().rev() {
            let yp = block.permute(y.view());
            let passive = yp.slice(s![.., ..half]);
            let (_, _, out) = block.subnet(passive);
            let scale = self.soft_clamp(&out.slice(s![.., ..half]).to_owned());
            let shift = out.slice(s![.., half..]);
            let active = (&yp.slice(s![.., half..]) - &shift) * scale.mapv(|v| (-v).exp());
            let mut xp = yp.clone();
            xp.slice_mut(s![.., half..]).assign(&active);
            y = block.unpermute(xp.view());
            if y.iter().any(|v| !v.is_finite()) {
                return Err(FlowError::Overflow { block: k });
            }
        }
        Ok(y)
    }

    pub fn inverse(&self, u: ArrayView1<f64>) -> Result<Array1<f64>, FlowError> {
        Ok(self.inverse_batch(u.insert_axis(Axis(0)))?.row(0).to_owned())
    }

    /// `log p(z) = −‖u‖²/2 − (C/2)·ln(2π) + log|det J|`.
    pub fn log_likelihood(&self, z: ArrayView1<f64>) -> Result<f64, FlowError> {
        let (u, ld) = self.forward(z)?;
        Ok(gaussian_log_density(u.view()) + ld)
    }

    pub fn log_likelihood_batch(&self, z: ArrayView2<f64>) -> Result<Array1<f64>, FlowError> {
        let (u, ld) = self.forward_batch(z)?;
        let mut out = ld;
        for (o, row) in out.iter_mut().zip(u.axis_iter(Axis(0))) {
            *o += gaussian_log_density(row);
        }
        Ok(out)
    }

    /// Reverse-mode pass. `grad_u` is `∂L/∂u` per row and `grad_logdet`
    /// `∂L/∂logdet` per row; returns `∂L/∂z` and per-block parameter grads.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_u: ArrayView2<f64>,
        grad_logdet: ArrayView1<f64>,
    ) -> (Array2<f64>, Vec<BlockGrad>) {
        let half = self.dim / 2;
        let alpha = self.clamp;
        let mut grad = grad_u.to_owned();
        let mut grads = Vec::with_capacity(self.blocks.len());
        for (block, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let gp = block.permute(grad.view());
            let g_passive_out = gp.slice(s![.., ..half]);
            let g_mapped = gp.slice(s![.., half..]);
            let exp_scale = c.scale.mapv(f64::exp);

            let g_active = &g_mapped * &exp_scale;
            let mut g_scale = &g_mapped * &c.active * &exp_scale;
            for (mut row, &gl) in g_scale.axis_iter_mut(Axis(0)).zip(grad_logdet.iter()) {
                row += gl;
            }
            let mut g_out = Array2::zeros((gp.nrows(), self.dim));
            Zip::from(g_out.slice_mut(s![.., ..half]))
                .and(&g_scale)
                .and(&c.raw_scale)
                .for_each(|o, &g, &s| {
                    let th = (s / alpha).tanh();
                    *o = g * (1.0 - th * th);
                });
            g_out.slice_mut(s![.., half..]).assign(&g_mapped);

            let w2 = g_out.t().dot(&c.hidden).as_standard_layout().into_owned();
            let b2 = g_out.sum_axis(Axis(0));
            let mut g_pre = g_out.dot(&block.w2);
            Zip::from(&mut g_pre).and(&c.pre).for_each(|g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
            let w1 = g_pre.t().dot(&c.passive).as_standard_layout().into_owned();
            let b1 = g_pre.sum_axis(Axis(0));
            let g_passive = &g_passive_out + &g_pre.dot(&block.w1);

            let mut gx = Array2::zeros(gp.raw_dim());
            gx.slice_mut(s![.., ..half]).assign(&g_passive);
            gx.slice_mut(s![.., half..]).assign(&g_active);
            grad = block.unpermute(gx.view());
            grads.push(BlockGrad { w1, b1, w2, b2 });
        }
        grads.reverse();
        (grad, grads)
    }
}

/// Log density of the standard normal in `u.len()` dimensions.
pub fn gaussian_log_density(u: ArrayView1<f64>) -> f64 {
    -0.5 * u.dot(&u) - 0.5 * u.len() as f64 * (2.0 * PI).ln()
}
