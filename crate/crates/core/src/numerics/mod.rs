//! Dense tensors and the reverse-mode tape every loss and model is built on.

mod params;
mod tape;
mod tensor;

pub use params::{backward, flatten_grads, unflatten_grads, BoundParams, GradMap, ParamSet};
pub(crate) use tape::blur_tensor;
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;

/// Normalised 1-D Gaussian kernel of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}
