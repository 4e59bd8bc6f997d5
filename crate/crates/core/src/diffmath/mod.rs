//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records primitive applications in execution order; calling
//! [`Tape::backward`] on a scalar output sweeps the record once in reverse
//! and returns gradients for every leaf created with `requires_grad`.
//! Gradients accumulate additively where a value fans out.
//!
//! The primitive set is deliberately closed: elementwise arithmetic, matmul,
//! 2D convolution, average pooling, nearest upsampling, wrap-around bilinear
//! sampling, sigmoid, relu, the temperature-sharpened [`softlike`] and
//! Gaussian blur, plus reductions. Domain modules extend it through
//! [`CustomOp`].

pub(crate) mod kernels;
pub mod optim;
mod tape;
mod tensor;

use thiserror::Error;

pub use optim::{clip_global_norm, Optimizer, OptimizerKind};
pub use kernels::{blur_kernel_size, gaussian_kernel, softplus, SOFTLIKE_EPS};
pub use tape::{Conv2dParams, CustomOp, Gradients, Layout, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub const DEFAULT_TAU: f64 = 0.3;

pub fn sigmoid(x: f64) -> f64 {
    kernels::sigmoid(x)
}

/// Sharpened normalization `r_i^(1/tau) / sum_j r_j^(1/tau)`.
///
/// Entries below [`SOFTLIKE_EPS`] are lifted to it first, so one-hot inputs
/// are accepted.
pub fn softlike(r: &[f64], tau: f64) -> Result<Vec<f64>, TensorError> {
    if r.is_empty() {
        return Err(TensorError::Shape("softlike of an empty vector".into()));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(TensorError::Parameter(format!("softlike temperature {tau}")));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite("softlike input".into()));
    }
    let mut out = vec![0.0; r.len()];
    kernels::softlike_row(r, tau, &mut out);
    Ok(out)
}

/// Wrap-around bilinear lookup on a 2D grid; `u` indexes columns, `v` rows.
pub fn bilinear_sample(grid: &Tensor, u: f64, v: f64) -> Result<f64, TensorError> {
    let s = grid.shape();
    if s.len() != 2 {
        return Err(TensorError::Shape(format!("bilinear grid {s:?}")));
    }
    if !u.is_finite() || !v.is_finite() {
        return Err(TensorError::NonFinite("bilinear coordinate".into()));
    }
    Ok(kernels::bilinear_taps(s[0], s[1], u, v).iter().map(|&(i, w)| w * grid.data()[i]).sum())
}
