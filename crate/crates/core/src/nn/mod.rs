//! Minimal differentiable-computation substrate.
//!
//! Dense row-major matrices, a recording tape with reverse-mode gradients,
//! the handful of layer primitives the quantizer and the decoder need, and Adam.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod layers;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::log_sum_exp;
pub use params::{ParamId, ParameterSet};
pub use tensor::Tensor;

/// Cosine learning-rate schedule from `base` down to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + libm::cos(core::f64::consts::PI * frac))
}
