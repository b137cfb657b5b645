//! Linear dimension reduction followed by projection onto the unit sphere.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Denominator guard for the normalization step.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error("expansion not permitted: output dimension {out_dim} exceeds input dimension {in_dim}")]
    Expansion { in_dim: usize, out_dim: usize },
    #[error("adapter dimensions must be positive")]
    ZeroDim,
    #[error("input has {got} values, adapter expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("non-finite raw feature")]
    NonFinite,
    #[error("feature collapsed under DR (norm {norm:e})")]
    Collapsed { norm: f64 },
}

/// The trainable reduction matrix, `out_dim × in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub weight: Array2<f64>,
}

impl AdapterParams {
    pub fn init(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self, AdapterError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(in_dim, out_dim, &mut rng)
    }

    /// Entries are i.i.d. `N(0, 1/in_dim)`.
    pub fn init_with_rng(
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, AdapterError> {
        if in_dim == 0 || out_dim == 0 {
            return Err(AdapterError::ZeroDim);
        }
        if out_dim > in_dim {
            return Err(AdapterError::Expansion { in_dim, out_dim });
        }
        let normal = Normal::new(0.0, (1.0 / in_dim as f64).sqrt()).unwrap();
        let weight = Array2::from_shape_simple_fn((out_dim, in_dim), || normal.sample(rng));
        Ok(Self { weight })
    }

    pub fn from_weight(weight: Array2<f64>) -> Result<Self, AdapterError> {
        let (out_dim, in_dim) = weight.dim();
        if in_dim == 0 || out_dim == 0 {
            return Err(AdapterError::ZeroDim);
        }
        if out_dim > in_dim {
            return Err(AdapterError::Expansion { in_dim, out_dim });
        }
        Ok(Self { weight })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn project(&self, raw: ArrayView1<f64>) -> Result<(Array1<f64>, f64), AdapterError> {
        if raw.len() != self.in_dim() {
            return Err(AdapterError::InputDim {
                expected: self.in_dim(),
                got: raw.len(),
            });
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(AdapterError::NonFinite);
        }
        let v = self.weight.dot(&raw);
        let norm = v.dot(&v).sqrt();
        if !(norm > NORM_EPS) {
            return Err(AdapterError::Collapsed { norm });
        }
        Ok((v, norm))
    }

    /// `z = W·raw / ‖W·raw‖₂`.
    pub fn adapt(&self, raw: ArrayView1<f64>) -> Result<Array1<f64>, AdapterError> {
        let (v, norm) = self.project(raw)?;
        Ok(v / norm)
    }

    /// Exact Jacobian `∂z/∂raw = (I − z zᵀ) W / ‖W·raw‖`.
    pub fn jacobian(&self, raw: ArrayView1<f64>) -> Result<Array2<f64>, AdapterError> {
        let (v, norm) = self.project(raw)?;
        let z = v / norm;
        let c = z.len();
        let mut proj = Array2::<f64>::eye(c);
        for i in 0..c {
            for j in 0..c {
                proj[[i, j]] -= z[i] * z[j];
            }
        }
        Ok(proj.dot(&self.weight) / norm)
    }

    /// Row-wise `adapt` over a batch (`batch × in_dim`).
    pub fn adapt_batch(&self, raw: ArrayView2<f64>) -> Result<AdaptedBatch, AdapterError> {
        let mut z = Array2::zeros((raw.nrows(), self.out_dim()));
        let mut norms = Array1::zeros(raw.nrows());
        for (i, row) in raw.axis_iter(Axis(0)).enumerate() {
            let (v, norm) = self.project(row)?;
            z.row_mut(i).assign(&(v / norm));
            norms[i] = norm;
        }
        Ok(AdaptedBatch { z, norms })
    }

    /// Pulls a gradient on adapted features back to the weight matrix.
    pub fn backward(
        &self,
        raw: ArrayView2<f64>,
        adapted: &AdaptedBatch,
        grad_z: ArrayView2<f64>,
    ) -> Array2<f64> {
        let mut grad_v = Array2::zeros(grad_z.raw_dim());
        for i in 0..grad_z.nrows() {
            let z = adapted.z.row(i);
            let g = grad_z.row(i);
            let radial = z.dot(&g);
            let n = adapted.norms[i];
            grad_v
                .row_mut(i)
                .assign(&((&g - &(&z * radial)) / n));
        }
        grad_v.t().dot(&raw).as_standard_layout().into_owned()
    }
}

/// Adapted features and the pre-normalization norms needed for backprop.
#[derive(Debug, Clone)]
pub struct AdaptedBatch {
    pub z: Array2<f64>,
    pub norms: Array1<f64>,
}
