//! The analytic property suite run by `rsddpm verify` and reused by the
//! acceptance tests. Every check reports its measured error next to its
//! tolerance.

use std::fmt;

use crate::data::{ShapeSceneSpec, SplitSizes, Task};
use crate::diffusion::{
    posterior_mean, q_sample_closed, q_sample_closed_batch, q_sample_step, sample, sample_with, NoisePredictor,
    ReverseNoise, TimeStep,
};
use crate::error::Result;
use crate::io::{denoiser_checkpoint, Checkpoint};
use crate::models::{Denoiser, UNetConfig};
use crate::numeric::{gaussian, relative_error, Graph, Real, Rng, Tensor};
use crate::pipeline::{combine, residual, residual_target};
use crate::schedule::{Schedule, BETA_END, BETA_START};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `measured < tolerance` (or `<=` when `inclusive`).
    fn below(name: &'static str, measured: f64, tolerance: f64, inclusive: bool) -> Self {
        let passed = measured.is_finite() && if inclusive { measured <= tolerance } else { measured < tolerance };
        Check {
            name,
            measured,
            tolerance,
            passed,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:<32} measured {:.3e}  tolerance {:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

/// Deliberate faults for checking that the suite can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    /// Use `alpha_t` wherever the schedule should supply `alpha_bar_t`.
    AlphaForAlphaBar,
}

impl std::str::FromStr for Mutation {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha-for-alpha-bar" => Ok(Mutation::AlphaForAlphaBar),
            other => Err(crate::Error::InvalidArgument(format!("unknown mutation {other:?}"))),
        }
    }
}

/// Oracle that knows the clean target and returns the exact generating noise
/// `(x_t - sqrt(alpha_bar_t) x0) / sqrt(1 - alpha_bar_t)`.
pub struct ExactNoiseOracle<'a, T> {
    pub x0: &'a Tensor<T>,
    pub schedule: &'a Schedule,
}

impl<T: Real> NoisePredictor<T> for ExactNoiseOracle<'_, T> {
    fn predict(&self, x_t: &Tensor<T>, _cond: &Tensor<T>, t: TimeStep) -> Result<Tensor<T>> {
        let ab = self.schedule.alpha_bars()[t.get() - 1];
        let (a, b) = (T::from_f64(ab.sqrt()), T::from_f64(1.0 / (1.0 - ab).sqrt()));
        x_t.zip_with(self.x0, "exact_noise_oracle", |x, x0| (x - a * x0) * b)
    }

    fn state_shape(&self, _cond: &[usize]) -> Result<Vec<usize>> {
        Ok(self.x0.shape().to_vec())
    }
}

/// Predicts zero noise everywhere; the chain becomes a linear Gaussian recursion.
pub struct ZeroPredictor;

impl<T: Real> NoisePredictor<T> for ZeroPredictor {
    fn predict(&self, x_t: &Tensor<T>, _cond: &Tensor<T>, _t: TimeStep) -> Result<Tensor<T>> {
        Tensor::zeros(x_t.shape())
    }

    fn state_shape(&self, cond: &[usize]) -> Result<Vec<usize>> {
        Ok(cond.to_vec())
    }
}

/// Gaussian posterior `q(x_{t-1} | x_t, x0)` mean, written from its
/// textbook coefficients rather than through the noise parameterisation.
pub fn posterior_mean_oracle(x0: f64, x_t: f64, t: usize, s: &Schedule) -> f64 {
    let beta = s.betas()[t - 1];
    let alpha = s.alphas()[t - 1];
    let ab = s.alpha_bars()[t - 1];
    let ab_prev = if t == 1 { 1.0 } else { s.alpha_bars()[t - 2] };
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    c0 * x0 + ct * x_t
}

pub const SCHEDULE_HORIZONS: [usize; 5] = [2, 3, 10, 100, 1000];

/// Worst endpoint error of `beta_1 = 1e-4`, `beta_T = 2e-2` over the horizons.
pub fn schedule_endpoint_error() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for t in SCHEDULE_HORIZONS {
        let s = Schedule::new(t)?;
        worst = worst.max((s.betas()[0] - BETA_START).abs());
        worst = worst.max((s.betas()[t - 1] - BETA_END).abs());
    }
    Ok(worst)
}

/// Largest second difference of `beta_t` (zero for an affine schedule).
pub fn schedule_second_difference() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for t in SCHEDULE_HORIZONS {
        let b = Schedule::new(t)?.betas().to_vec();
        for w in b.windows(3) {
            worst = worst.max((w[2] - 2.0 * w[1] + w[0]).abs());
        }
    }
    Ok(worst)
}

/// Relative error of `alpha_bar_{t+1} = alpha_bar_t alpha_{t+1}`, and of
/// `alpha_t = 1 - beta_t`.
pub fn alpha_bar_recurrence_error() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for t in SCHEDULE_HORIZONS {
        let s = Schedule::new(t)?;
        for i in 0..t {
            worst = worst.max((s.alphas()[i] - (1.0 - s.betas()[i])).abs() / s.alphas()[i]);
            if i + 1 < t {
                let want = s.alpha_bars()[i] * s.alphas()[i + 1];
                worst = worst.max((s.alpha_bars()[i + 1] - want).abs() / want);
            }
        }
    }
    Ok(worst)
}

/// Violation of `0 < alpha_bar_T < ... < alpha_bar_1 < 1`, `beta_tilde_1 = 0`,
/// `beta_tilde_t <= beta_t` and `sigma_t^2 = beta_tilde_t`; zero when all hold.
pub fn schedule_order_violation() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for t in SCHEDULE_HORIZONS {
        let s = Schedule::new(t)?;
        let ab = s.alpha_bars();
        worst = worst.max(s.beta_tildes()[0].abs());
        worst = worst.max((-ab[t - 1]).max(0.0));
        worst = worst.max((ab[0] - 1.0).max(0.0));
        for i in 0..t {
            if i > 0 {
                worst = worst.max((ab[i] - ab[i - 1]).max(0.0));
                if ab[i] == ab[i - 1] {
                    worst = worst.max(f64::EPSILON);
                }
            }
            worst = worst.max((s.beta_tildes()[i] - s.betas()[i]).max(0.0));
            worst = worst.max((s.sigma_sqs()[i] - s.beta_tildes()[i]).abs());
        }
    }
    Ok(worst)
}

/// Monte-Carlo agreement of iterated one-step noising with the closed form,
/// as the worst deviation in standard errors over every `t`, for mean and
/// variance.
pub fn reparameterization_z_score(steps: usize, draws: usize, x0: f64, seed: u64) -> Result<f64> {
    let s = Schedule::new(steps)?;
    let mut rng = Rng::new(seed);
    let mut x = Tensor::<f64>::full(&[draws], x0)?;
    let n = draws as f64;
    let mut worst: f64 = 0.0;
    for t in 1..=steps {
        let eps = gaussian(&mut rng, &[draws])?;
        x = q_sample_step(&x, TimeStep::new(t, &s)?, &eps, &s)?;
        let ab = s.alpha_bars()[t - 1];
        let (mu, var) = (ab.sqrt() * x0, 1.0 - ab);
        let mean = x.mean();
        let emp = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        worst = worst.max((mean - mu).abs() / (var / n).sqrt());
        worst = worst.max((emp - var).abs() / (var * (2.0 / (n - 1.0)).sqrt()));
    }
    Ok(worst)
}

/// Max abs difference between the noise-parameterised posterior mean fed the
/// true noise and [`posterior_mean_oracle`], over `cases` random draws at
/// every `t`. `mutation` corrupts the schedule seen by the library side only.
pub fn posterior_identity_error(steps: usize, cases: usize, seed: u64, mutation: Option<Mutation>) -> Result<f64> {
    let s = Schedule::new(steps)?;
    #[allow(unused_mut)]
    let mut lib = s.clone();
    match mutation {
        #[cfg(debug_assertions)]
        Some(Mutation::AlphaForAlphaBar) => lib.inject_alpha_for_alpha_bar(),
        #[cfg(not(debug_assertions))]
        Some(Mutation::AlphaForAlphaBar) => {
            return Err(crate::Error::InvalidArgument(
                "fault injection is only available in debug builds".into(),
            ))
        }
        None => {}
    }
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for t in 1..=steps {
        let x0: Tensor<f64> = gaussian(&mut rng, &[cases])?.scale(2.0);
        let eps: Tensor<f64> = gaussian(&mut rng, &[cases])?;
        let ts = TimeStep::new(t, &s)?;
        let x_t = q_sample_closed(&x0, ts, &eps, &s)?;
        let mu = posterior_mean(&x_t, &eps, ts, &lib)?.mean;
        for i in 0..cases {
            let want = posterior_mean_oracle(x0.data()[i], x_t.data()[i], t, &s);
            worst = worst.max((mu.data()[i] - want).abs());
        }
    }
    Ok(worst)
}

/// Relative error between the two equivalent reverse-step coefficients
/// `beta_t / sqrt(1 - alpha_bar_t)` and `(1 - alpha_t) / sqrt(1 - alpha_bar_t)`.
pub fn coefficient_identity_error(steps: usize) -> Result<f64> {
    let s = Schedule::new(steps)?;
    let mut worst: f64 = 0.0;
    for i in 0..steps {
        let d = (1.0 - s.alpha_bars()[i]).sqrt();
        let a = s.betas()[i] / d;
        let b = (1.0 - s.alphas()[i]) / d;
        worst = worst.max((a - b).abs() / a.abs());
    }
    Ok(worst)
}

/// Max abs error of `combine(residual_target(x0, residual(x_hat, x0)), x_hat) == x0`
/// in single precision over `pairs` random tensors.
pub fn residual_identity_error(pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let x0: Tensor<f32> = gaussian::<f32>(&mut rng, &[1, 1, 4, 4])?.map(|v| v.tanh());
        let x_hat: Tensor<f32> = gaussian::<f32>(&mut rng, &[1, 1, 4, 4])?.map(|v| v.tanh());
        let x_bar = residual_target(&x0, &residual(&x_hat, &x0)?)?;
        let out = combine(&x_bar, &x_hat)?;
        worst = worst.max(out.max_abs_diff(&x0)?);
    }
    Ok(worst)
}

/// Oracle-denoiser chain with `z = 0` followed by the ensemble combination;
/// max abs error against `x0`.
pub fn oracle_chain_error(steps: usize, seed: u64) -> Result<f64> {
    let s = Schedule::new(steps)?;
    let mut rng = Rng::new(seed);
    let x0: Tensor<f64> = gaussian::<f64>(&mut rng, &[4, 1, 8, 8])?.map(|v| v.signum());
    let x_hat: Tensor<f64> = gaussian::<f64>(&mut rng, &[4, 1, 8, 8])?.map(|v| (0.8 * v).tanh());
    let x_bar0 = residual_target(&x0, &residual(&x_hat, &x0)?)?;
    let oracle = ExactNoiseOracle {
        x0: &x_bar0,
        schedule: &s,
    };
    let x_bar = sample_with(&oracle, &x_hat, &s, &mut rng, ReverseNoise::Zero)?;
    combine(&x_bar, &x_hat)?.max_abs_diff(&x0)
}

/// Empirical output variance of the zero-predictor chain against the scalar
/// recursion `Var_{t-1} = Var_t / alpha_t + beta_tilde_t`, in standard errors.
pub fn zero_chain_variance_z_score(steps: usize, runs: usize, seed: u64) -> Result<f64> {
    let s = Schedule::new(steps)?;
    let mut var = 1.0;
    for t in (2..=steps).rev() {
        let k = s.lookup(t)?;
        var = var / k.alpha + k.beta_tilde;
    }
    var /= s.alphas()[0];
    let cond = Tensor::<f64>::zeros(&[runs, 1])?;
    let out = sample(&ZeroPredictor, &cond, &s, &mut Rng::new(seed))?;
    let n = runs as f64;
    let mean = out.mean();
    let emp = out.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((emp - var).abs() / (var * (2.0 / (n - 1.0)).sqrt()))
}

/// Closed-form noising of all-ones with all-ones noise at `T = 3, t = 3`,
/// against the high-precision value 1.157962356081058.
pub fn closed_form_value_error() -> Result<f64> {
    let s = Schedule::new(3)?;
    let ones = Tensor::<f64>::ones(&[4])?;
    let out = q_sample_closed(&ones, TimeStep::new(3, &s)?, &ones, &s)?;
    Ok(out.data().iter().map(|v| (v - 1.157_962_356_081_058).abs()).fold(0.0, f64::max))
}

/// Desk-scale noise-predictor architecture used by the gradient check.
pub fn desk_denoiser_config() -> UNetConfig {
    UNetConfig {
        base_channels: 16,
        channel_mults: vec![1, 2, 2],
        groups: 4,
        time_embed_dim: Some(32),
    }
}

/// Worst relative error between analytic gradients of the noise-prediction
/// loss and central differences, at `coords` random parameter coordinates of
/// a double-precision denoiser. The denominator is floored at `floor`.
pub fn denoiser_gradient_error(
    config: &UNetConfig,
    size: usize,
    steps: usize,
    coords: usize,
    h: f64,
    floor: f64,
    seed: u64,
) -> Result<f64> {
    let s = Schedule::new(steps)?;
    let mut rng = Rng::new(seed);
    let mut d = Denoiser::<f64>::new(config, 1, 1, steps, &mut rng)?;
    let batch = 2;
    let cond: Tensor<f64> = gaussian(&mut rng, &[batch, 1, size, size])?;
    let x_bar: Tensor<f64> = gaussian(&mut rng, &[batch, 1, size, size])?;
    let eps: Tensor<f64> = gaussian(&mut rng, &[batch, 1, size, size])?;
    let ts: Vec<usize> = (0..batch).map(|_| rng.int_in(1, steps)).collect();
    let steps_v: Vec<TimeStep> = ts.iter().map(|&t| TimeStep::new(t, &s)).collect::<Result<_>>()?;
    let x_t = q_sample_closed_batch(&x_bar, &steps_v, &eps, &s)?;

    let loss_of = |d: &Denoiser<f64>, train: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut g = if train { Graph::new() } else { Graph::inference() };
        let xn = g.constant(x_t.clone());
        let cn = g.constant(cond.clone());
        let target = g.constant(eps.clone());
        let pred = d.forward(&mut g, xn, cn, &ts)?;
        let loss = g.mse_loss(pred, target)?;
        let v = g.value(loss).item();
        let grad = if train {
            g.backward(loss)?.for_store(&d.params).map(|gr| gr.data)
        } else {
            None
        };
        Ok((v, grad))
    };
    let (_, grad) = loss_of(&d, true)?;
    let grad = grad.ok_or_else(|| crate::Error::InvalidArgument("denoiser produced no gradient".into()))?;

    let sizes: Vec<usize> = d.params.blocks().iter().map(|b| b.value.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let flat = rng.int_in(0, total - 1);
        let (mut block, mut off) = (0, flat);
        while off >= sizes[block] {
            off -= sizes[block];
            block += 1;
        }
        let orig = d.params.blocks()[block].value.data()[off];
        d.params.blocks_mut()?[block].value.data_mut()[off] = orig + h;
        let (lp, _) = loss_of(&d, false)?;
        d.params.blocks_mut()?[block].value.data_mut()[off] = orig - h;
        let (lm, _) = loss_of(&d, false)?;
        d.params.blocks_mut()?[block].value.data_mut()[off] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        worst = worst.max(relative_error(grad[flat], numeric, floor));
    }
    Ok(worst)
}

/// Number of bytes that differ after a save/load/save cycle of a freshly
/// initialised checkpoint (plus one if the parameter digests differ).
pub fn checkpoint_round_trip_mismatch(seed: u64) -> Result<f64> {
    let cfg = UNetConfig {
        base_channels: 8,
        channel_mults: vec![1, 2],
        groups: 4,
        time_embed_dim: Some(16),
    };
    let d = Denoiser::<f32>::new(&cfg, 1, 1, 10, &mut Rng::new(seed))?;
    let bytes = denoiser_checkpoint("seed = 0".into(), 8, 8, &d).to_bytes();
    let back = Checkpoint::<f32>::from_bytes(&bytes)?;
    let d2 = back.into_denoiser()?;
    let again = denoiser_checkpoint("seed = 0".into(), 8, 8, &d2).to_bytes();
    let mut diff = bytes.len().abs_diff(again.len());
    diff += bytes.iter().zip(&again).filter(|(a, b)| a != b).count();
    if d.params.digest() != d2.params.digest() {
        diff += 1;
    }
    Ok(diff as f64)
}

/// Regenerating a small dataset gives identical bytes and disjoint splits;
/// returns the number of mismatching items.
pub fn dataset_determinism_mismatch(seed: u64) -> Result<f64> {
    let spec = ShapeSceneSpec {
        seed,
        ..ShapeSceneSpec::default()
    };
    let sizes = SplitSizes { train: 8, val: 4, test: 4 };
    let a = crate::data::Dataset::<f32>::generate(&spec, Task::Segmentation, sizes)?;
    let b = crate::data::Dataset::<f32>::generate(&spec, Task::Segmentation, sizes)?;
    a.check_disjoint()?;
    Ok(a.items.iter().zip(&b.items).filter(|(x, y)| x != y).count() as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    pub mutation: Option<Mutation>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            mutation: None,
        }
    }
}

/// Runs every check in a fixed order. Errors inside a check are reported as
/// a failure with an infinite measurement rather than aborting the suite.
pub fn run_all(opts: &VerifyOptions) -> Vec<Check> {
    let seed = opts.seed;
    let m = |r: Result<f64>| r.unwrap_or(f64::INFINITY);
    vec![
        Check::below("schedule_endpoints", m(schedule_endpoint_error()), 1e-15, false),
        Check::below("schedule_linearity", m(schedule_second_difference()), 1e-12, false),
        Check::below("alpha_bar_recurrence", m(alpha_bar_recurrence_error()), 1e-15, true),
        Check::below("schedule_ordering", m(schedule_order_violation()), 0.0, true),
        Check::below("closed_form_value", m(closed_form_value_error()), 1e-12, false),
        Check::below(
            "reparameterization_monte_carlo",
            m(reparameterization_z_score(10, 100_000, 1.5, seed)),
            4.0,
            false,
        ),
        Check::below(
            "posterior_mean_identity",
            m(posterior_identity_error(50, 100, seed, opts.mutation)),
            1e-6,
            false,
        ),
        Check::below(
            "reverse_coefficient_identity",
            m(coefficient_identity_error(1000)),
            // alpha_t = 1 - beta_t rounds at ulp(1), so 1 - alpha_t recovers
            // beta_t only to about eps / beta_t relative.
            2.0 * f64::EPSILON / BETA_START,
            false,
        ),
        Check::below("residual_ensemble_identity", m(residual_identity_error(1000, seed)), 1e-6, false),
        Check::below("oracle_denoiser_chain", m(oracle_chain_error(5, seed)), 1e-3, false),
        Check::below(
            "zero_denoiser_variance",
            m(zero_chain_variance_z_score(5, 10_000, seed)),
            4.0,
            false,
        ),
        Check::below(
            "denoiser_gradient",
            m(denoiser_gradient_error(&desk_denoiser_config(), 16, 100, 20, 1e-4, 1e-6, seed)),
            1e-5,
            false,
        ),
        Check::below("checkpoint_round_trip", m(checkpoint_round_trip_mismatch(seed)), 0.0, true),
        Check::below("dataset_determinism", m(dataset_determinism_mismatch(seed)), 0.0, true),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_matches_library_posterior_mean() {
        assert!(posterior_identity_error(50, 100, 1, None).unwrap() < 1e-6);
    }

    #[cfg(debug_assertions)]
    #[test]
    fn alpha_for_alpha_bar_mutation_is_caught() {
        let err = posterior_identity_error(50, 100, 1, Some(Mutation::AlphaForAlphaBar)).unwrap();
        assert!(err > 1e-3, "mutation went unnoticed: {err}");
    }

    #[test]
    fn small_checks_pass() {
        assert_eq!(schedule_order_violation().unwrap(), 0.0);
        assert!(oracle_chain_error(5, 3).unwrap() < 1e-3);
        assert!(residual_identity_error(100, 3).unwrap() < 1e-6);
        assert!(closed_form_value_error().unwrap() < 1e-12);
        assert_eq!(checkpoint_round_trip_mismatch(1).unwrap(), 0.0);
    }
}
