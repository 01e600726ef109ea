//! Residual-ensemble denoising diffusion.
//!
//! A frozen end-to-end learner produces `x_hat = E2E(I)`. A conditional
//! diffusion model is trained on the reflected target `x_bar = 2 x - x_hat`
//! and, at inference, the two outputs are averaged so the end-to-end
//! residual cancels. Without an end-to-end learner (restoration) the input
//! image itself plays the role of `x_hat`.

pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod models;
pub mod numeric;
pub mod pipeline;
pub mod schedule;
pub mod verify;

pub use error::{Error, Result};
