//! Dense tensors, a reverse-mode tape and the optimiser.

mod graph;
pub mod kernels;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use graph::{clamped_log_sigmoid, log_sigmoid, sigmoid, Gradients, Graph, Var};
pub use optim::Adam;
pub use params::{Bound, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::{numel, Tensor};

use crate::error::{invalid, Result};

/// Tempered softmax of a logit vector: `exp(l_i / tau) / sum_k exp(l_k / tau)`.
pub fn softmax_t<T: Scalar>(logits: &[T], tau: f64) -> Result<Vec<T>> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(invalid!("temperature must be positive, got {tau}"));
    }
    if logits.is_empty() {
        return Err(invalid!("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("softmax of non-finite logits"));
    }
    let mut out = vec![T::zero(); logits.len()];
    kernels::softmax_row(logits, T::of(tau), None, &mut out);
    Ok(out)
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy<T: Scalar>(p: &[T]) -> f64 {
    p.iter()
        .map(|v| v.as_f64())
        .filter(|&v| v > 0.0)
        .map(|v| -v * v.ln())
        .sum()
}
