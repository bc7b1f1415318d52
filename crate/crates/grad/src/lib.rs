//! Minimal dense-tensor numeric core with reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive executed on it. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! accumulates gradients for every leaf that requires them.
//!
//! Everything is double precision and single threaded. Each primitive checks
//! its output for non-finite values and fails with the primitive's name.

pub mod check;
mod graph;
mod kernels;
mod ops;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{ParamBinder, ParamStore};
pub use tensor::Tensor;

/// Errors raised by tensor primitives and the backward pass.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid operand: {detail}")]
    InvalidOperand { op: &'static str, detail: String },
    #[error("{op}: non-finite result")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss does not depend on any tensor that requires grad")]
    Detached,
    #[error("variable belongs to a different graph")]
    ForeignVar,
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T, E = GradError> = std::result::Result<T, E>;

/// Exact GELU, `x * Phi(x)` with the erf-based normal CDF.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Derivative of [`gelu_scalar`]: `Phi(x) + x * phi(x)`.
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}
