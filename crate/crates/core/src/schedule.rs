//! Linear variance schedule and every per-timestep scalar derived from it.
//!
//! Timesteps are 1-based: `t` runs over `1..=T`. With the convention
//! `alpha_bar_0 = 1`, the posterior variance at `t = 1` is exactly zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// Name recorded in checkpoints for this schedule family.
pub const SCHEDULE_ALGORITHM: &str = "linear-eq24";

/// Scalars for one timestep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepScalars {
    pub beta: f64,
    pub alpha: f64,
    pub alpha_bar: f64,
    pub beta_tilde: f64,
    pub sigma_sq: f64,
}

/// Precomputed in f64 regardless of run precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
    sigma_sq: Vec<f64>,
}

impl Schedule {
    /// `beta_t = (1e-4 (T - t) + 2e-2 (t - 1)) / (T - 1)` for `t = 1..=T`.
    pub fn new(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs T >= 2: beta_t divides by (T - 1), got T = {steps}"
            )));
        }
        let denom = (steps - 1) as f64;
        let beta: Vec<f64> = (1..=steps)
            .map(|t| (BETA_START * (steps - t) as f64 + BETA_END * (t - 1) as f64) / denom)
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let beta_tilde: Vec<f64> = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect();
        let sigma_sq = beta_tilde.clone();
        Ok(Schedule {
            steps,
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
            sigma_sq,
        })
    }

    /// Horizon `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::TimestepOutOfRange { t, max: self.steps });
        }
        Ok(())
    }

    pub fn lookup(&self, t: usize) -> Result<StepScalars> {
        self.check_t(t)?;
        let i = t - 1;
        Ok(StepScalars {
            beta: self.beta[i],
            alpha: self.alpha[i],
            alpha_bar: self.alpha_bar[i],
            beta_tilde: self.beta_tilde[i],
            sigma_sq: self.sigma_sq[i],
        })
    }

    /// `alpha_bar_t` with `alpha_bar_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.lookup(t)?.alpha_bar)
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta_tildes(&self) -> &[f64] {
        &self.beta_tilde
    }

    pub fn sigma_sqs(&self) -> &[f64] {
        &self.sigma_sq
    }

    /// Fault injection for the verification suite: overwrites every
    /// `alpha_bar_t` with `alpha_t`. Only compiled with debug assertions.
    #[cfg(debug_assertions)]
    #[doc(hidden)]
    pub fn inject_alpha_for_alpha_bar(&mut self) {
        self.alpha_bar = self.alpha.clone();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_short_horizons() {
        for t in [0, 1] {
            let err = Schedule::new(t).unwrap_err().to_string();
            assert!(err.contains("T - 1"), "{err}");
        }
    }

    #[test]
    fn endpoints_at_t1000() {
        let s = Schedule::new(1000).unwrap();
        assert!((s.lookup(1).unwrap().beta - 1e-4).abs() < 1e-15);
        assert!((s.lookup(1000).unwrap().beta - 0.02).abs() < 1e-15);
        assert_eq!(s.lookup(1).unwrap().beta_tilde, 0.0);
        assert_eq!(s.lookup(1).unwrap().sigma_sq, 0.0);
    }

    #[test]
    fn two_step_schedule_hits_both_endpoints() {
        let s = Schedule::new(2).unwrap();
        assert!((s.betas()[0] - 1e-4).abs() < 1e-18);
        assert!((s.betas()[1] - 0.02).abs() < 1e-17);
    }

    #[test]
    fn three_step_values_match_hand_evaluation() {
        // Independently evaluated at 40 digits.
        let s = Schedule::new(3).unwrap();
        let mid = s.lookup(2).unwrap();
        assert!((mid.beta - 0.01005).abs() < 1e-16);
        assert!((s.alpha_bars()[2] - 0.970_053_984_9).abs() < 1e-12);
        assert!((mid.beta_tilde - 9.902_458_322_227_964e-5).abs() < 1e-15);
        assert!((s.beta_tildes()[2] - 6.778_194_004_183_214e-3).abs() < 1e-14);
    }

    #[test]
    fn lookup_rejects_out_of_range() {
        let s = Schedule::new(10).unwrap();
        assert!(matches!(s.lookup(0), Err(Error::TimestepOutOfRange { .. })));
        assert!(s.lookup(11).is_err());
        assert_eq!(s.alpha_bar_at(0).unwrap(), 1.0);
    }

    #[test]
    fn invariants_hold_across_horizons() {
        for steps in [2, 3, 10, 100, 1000] {
            let s = Schedule::new(steps).unwrap();
            for i in 0..steps {
                assert_eq!(s.alphas()[i], 1.0 - s.betas()[i]);
                assert!(s.beta_tildes()[i] <= s.betas()[i]);
                assert_eq!(s.sigma_sqs()[i], s.beta_tildes()[i]);
                assert!(s.alpha_bars()[i] > 0.0 && s.alpha_bars()[i] < 1.0);
            }
            for i in 1..steps {
                assert!(s.betas()[i] > s.betas()[i - 1]);
                assert!(s.alpha_bars()[i] < s.alpha_bars()[i - 1]);
                let rel = (s.alpha_bars()[i - 1] * s.alphas()[i] - s.alpha_bars()[i]).abs() / s.alpha_bars()[i];
                assert!(rel < 1e-15);
            }
        }
    }
}
