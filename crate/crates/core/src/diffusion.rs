//! Forward noising, the reverse denoising chain and the noise-prediction
//! objective, all over the residual target space.

use crate::error::{Error, Result};
use crate::numeric::{gaussian, Real, Rng, Tensor};
use crate::schedule::Schedule;

/// A timestep validated against a schedule, `1 <= t <= T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TimeStep(usize);

impl TimeStep {
    pub fn new(t: usize, schedule: &Schedule) -> Result<Self> {
        schedule.check_t(t)?;
        Ok(TimeStep(t))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

/// Mean and isotropic variance of one reverse transition.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams<T> {
    pub mean: Tensor<T>,
    pub variance_scalar: f64,
}

/// Anything that predicts the injected noise from `(x_t, condition, t)`.
/// Implemented by the trained denoiser and by test oracles.
pub trait NoisePredictor<T: Real> {
    fn predict(&self, x_t: &Tensor<T>, cond: &Tensor<T>, t: TimeStep) -> Result<Tensor<T>>;

    /// Shape of the diffusion state for a given condition shape.
    fn state_shape(&self, cond_shape: &[usize]) -> Result<Vec<usize>>;
}

fn lin2<T: Real>(a: f64, x: &Tensor<T>, b: f64, y: &Tensor<T>, op: &'static str) -> Result<Tensor<T>> {
    let (a, b) = (T::from_f64(a), T::from_f64(b));
    x.zip_with(y, op, |u, v| a * u + b * v)
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn q_sample_closed<T: Real>(x0: &Tensor<T>, t: TimeStep, eps: &Tensor<T>, s: &Schedule) -> Result<Tensor<T>> {
    let ab = s.lookup(t.get())?.alpha_bar;
    lin2(ab.sqrt(), x0, (1.0 - ab).sqrt(), eps, "q_sample_closed")
}

/// Closed-form noising with an independent timestep per batch item.
pub fn q_sample_closed_batch<T: Real>(
    x0: &Tensor<T>,
    ts: &[TimeStep],
    eps: &Tensor<T>,
    s: &Schedule,
) -> Result<Tensor<T>> {
    x0.same_shape(eps, "q_sample_closed_batch")?;
    if ts.len() != x0.batch() {
        return Err(Error::InvalidArgument(format!(
            "{} timesteps for a batch of {}",
            ts.len(),
            x0.batch()
        )));
    }
    let inner = x0.len() / x0.batch();
    let mut out = x0.clone();
    for (i, t) in ts.iter().enumerate() {
        let ab = s.lookup(t.get())?.alpha_bar;
        let (ca, cb) = (T::from_f64(ab.sqrt()), T::from_f64((1.0 - ab).sqrt()));
        let range = i * inner..(i + 1) * inner;
        for (o, &e) in out.data_mut()[range.clone()].iter_mut().zip(&eps.data()[range]) {
            *o = ca * *o + cb * e;
        }
    }
    Ok(out)
}

/// One forward transition: `sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps`.
pub fn q_sample_step<T: Real>(x_prev: &Tensor<T>, t: TimeStep, eps: &Tensor<T>, s: &Schedule) -> Result<Tensor<T>> {
    let beta = s.lookup(t.get())?.beta;
    lin2((1.0 - beta).sqrt(), x_prev, beta.sqrt(), eps, "q_sample_step")
}

/// `mu = (x_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_t)`
/// with variance `sigma_t^2 = beta_tilde_t`.
pub fn posterior_mean<T: Real>(
    x_t: &Tensor<T>,
    eps_pred: &Tensor<T>,
    t: TimeStep,
    s: &Schedule,
) -> Result<PosteriorParams<T>> {
    let k = s.lookup(t.get())?;
    let inv = 1.0 / k.alpha.sqrt();
    let coef = (1.0 - k.alpha) / (1.0 - k.alpha_bar).sqrt();
    let mean = lin2(inv, x_t, -inv * coef, eps_pred, "posterior_mean")?;
    Ok(PosteriorParams {
        mean,
        variance_scalar: k.sigma_sq,
    })
}

/// Noisy reverse transition for `t >= 2`:
/// `(x_t - beta_t / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_t) + sqrt(beta_tilde_t) z`.
pub fn reverse_step<T: Real>(
    x_t: &Tensor<T>,
    eps_pred: &Tensor<T>,
    t: TimeStep,
    z: &Tensor<T>,
    s: &Schedule,
) -> Result<Tensor<T>> {
    if t.get() < 2 {
        return Err(Error::InvalidArgument(
            "reverse_step is defined for t >= 2; use final_step at t = 1".into(),
        ));
    }
    x_t.same_shape(eps_pred, "reverse_step")?;
    x_t.same_shape(z, "reverse_step")?;
    let k = s.lookup(t.get())?;
    let inv = T::from_f64(1.0 / k.alpha.sqrt());
    let coef = T::from_f64(k.beta / (1.0 - k.alpha_bar).sqrt());
    let sigma = T::from_f64(k.beta_tilde.sqrt());
    let data = x_t
        .data()
        .iter()
        .zip(eps_pred.data())
        .zip(z.data())
        .map(|((&x, &e), &zi)| inv * (x - coef * e) + sigma * zi)
        .collect();
    Tensor::new(x_t.shape(), data)
}

/// Deterministic last step from `t = 1`.
pub fn final_step<T: Real>(x1: &Tensor<T>, eps_pred: &Tensor<T>, s: &Schedule) -> Result<Tensor<T>> {
    let k = s.lookup(1)?;
    let inv = 1.0 / k.alpha.sqrt();
    let coef = k.beta / (1.0 - k.alpha_bar).sqrt();
    lin2(inv, x1, -inv * coef, eps_pred, "final_step")
}

/// Mean squared error over every element.
pub fn training_loss<T: Real>(eps: &Tensor<T>, eps_pred: &Tensor<T>) -> Result<f64> {
    eps.same_shape(eps_pred, "training_loss")?;
    let s: f64 = eps
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(s / eps.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReverseNoise {
    /// Draw `z ~ N(0, I)` at every noisy step.
    Sampled,
    /// `z = 0`; the chain follows the posterior means.
    Zero,
}

/// Run the reverse chain from `x_T ~ N(0, I)` down to the residual target
/// estimate.
pub fn sample<T: Real, D: NoisePredictor<T> + ?Sized>(
    denoiser: &D,
    cond: &Tensor<T>,
    s: &Schedule,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    sample_with(denoiser, cond, s, rng, ReverseNoise::Sampled)
}

pub fn sample_with<T: Real, D: NoisePredictor<T> + ?Sized>(
    denoiser: &D,
    cond: &Tensor<T>,
    s: &Schedule,
    rng: &mut Rng,
    noise: ReverseNoise,
) -> Result<Tensor<T>> {
    let shape = denoiser.state_shape(cond.shape())?;
    let mut x = gaussian::<T>(rng, &shape)?;
    for t in (2..=s.steps()).rev() {
        let ts = TimeStep(t);
        let eps = denoiser.predict(&x, cond, ts)?;
        let z = match noise {
            ReverseNoise::Sampled => gaussian::<T>(rng, &shape)?,
            ReverseNoise::Zero => Tensor::zeros(&shape)?,
        };
        x = reverse_step(&x, &eps, ts, &z, s)?;
    }
    let eps = denoiser.predict(&x, cond, TimeStep(1))?;
    final_step(&x, &eps, s)
}
