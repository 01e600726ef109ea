//! Dense tensors, a tape-based reverse-mode differentiator and an Adam
//! optimizer. Everything else in the crate is built on this module.

mod graph;
mod kernels;
mod optim;
mod params;
mod real;
mod rng;
mod tensor;

pub use graph::{Graph, Grads, NodeId};
pub use optim::{Adam, AdamConfig};
pub use params::{Gradient, ParamId, ParamStore};
pub use real::{DType, Real};
pub use rng::{gaussian, Rng, RNG_ALGORITHM};
pub use tensor::Tensor;

/// Central finite-difference relative error used by the gradient checks:
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}
