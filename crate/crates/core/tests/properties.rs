//! Property tests for the schedule, the diffusion transitions, the residual
//! ensemble and the persistence formats.

use proptest::collection::vec;
use proptest::prelude::*;

use resddpm::data::{render_scene, ShapeSceneSpec};
use resddpm::diffusion::{final_step, posterior_mean, reverse_step, training_loss, TimeStep};
use resddpm::io::{denoiser_checkpoint, Checkpoint};
use resddpm::models::{Denoiser, UNetConfig};
use resddpm::numeric::{gaussian, Rng, Tensor};
use resddpm::pipeline::{combine, residual, residual_target};
use resddpm::schedule::Schedule;

fn tensor(v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(&[v.len()], v).unwrap()
}

fn norm(t: &Tensor<f64>) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_is_strictly_monotone(steps in 2usize..2000) {
        let s = Schedule::new(steps).unwrap();
        for w in s.betas().windows(2) {
            prop_assert!(w[1] > w[0]);
        }
        for w in s.alpha_bars().windows(2) {
            prop_assert!(w[1] < w[0]);
        }
        for i in 0..steps - 1 {
            let want = s.alpha_bars()[i] * s.alphas()[i + 1];
            prop_assert!((s.alpha_bars()[i + 1] - want).abs() <= 1e-15 * want);
        }
        prop_assert_eq!(s.beta_tildes()[0], 0.0);
    }

    #[test]
    fn residual_ensemble_is_identity(pairs in vec((-1.0f64..1.0, -1.0f64..1.0), 1..64)) {
        let (x0, x_hat): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (x0, x_hat) = (tensor(&x0), tensor(&x_hat));
        let x_bar = residual_target(&x0, &residual(&x_hat, &x0).unwrap()).unwrap();
        let out = combine(&x_bar, &x_hat).unwrap();
        prop_assert!(out.max_abs_diff(&x0).unwrap() < 1e-15);
    }

    #[test]
    fn ensemble_error_is_half_the_diffusion_error(
        rows in vec((-1.0f64..1.0, -1.0f64..1.0, -3.0f64..3.0), 1..64),
    ) {
        let x0 = tensor(&rows.iter().map(|r| r.0).collect::<Vec<_>>());
        let x_hat = tensor(&rows.iter().map(|r| r.1).collect::<Vec<_>>());
        let sampled = tensor(&rows.iter().map(|r| r.2).collect::<Vec<_>>());
        let target = residual_target(&x0, &residual(&x_hat, &x0).unwrap()).unwrap();
        let out = combine(&sampled, &x_hat).unwrap();
        let lhs = norm(&out.zip_with(&x0, "err", |a, b| a - b).unwrap());
        let rhs = 0.5 * norm(&sampled.zip_with(&target, "err", |a, b| a - b).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs));
    }

    #[test]
    fn noiseless_reverse_step_is_the_posterior_mean(seed in any::<u64>(), t in 2usize..=50) {
        let s = Schedule::new(50).unwrap();
        let mut rng = Rng::new(seed);
        let x: Tensor<f64> = gaussian(&mut rng, &[16]).unwrap();
        let e: Tensor<f64> = gaussian(&mut rng, &[16]).unwrap();
        let ts = TimeStep::new(t, &s).unwrap();
        let step = reverse_step(&x, &e, ts, &Tensor::zeros(&[16]).unwrap(), &s).unwrap();
        let mean = posterior_mean(&x, &e, ts, &s).unwrap();
        prop_assert!(step.max_abs_diff(&mean.mean).unwrap() < 1e-12);
        prop_assert_eq!(mean.variance_scalar, s.beta_tildes()[t - 1]);
        let last = final_step(&x, &e, &s).unwrap();
        let mean1 = posterior_mean(&x, &e, TimeStep::new(1, &s).unwrap(), &s).unwrap();
        prop_assert!(last.max_abs_diff(&mean1.mean).unwrap() < 1e-12);
    }

    #[test]
    fn training_loss_is_nonnegative_and_zero_only_at_equality(
        a in vec(-5.0f64..5.0, 1..32),
        k in 0usize..32,
        bump in 1e-3f64..1.0,
    ) {
        let x = tensor(&a);
        prop_assert_eq!(training_loss(&x, &x).unwrap(), 0.0);
        let mut b = a.clone();
        let i = k % b.len();
        b[i] += bump;
        prop_assert!(training_loss(&x, &tensor(&b)).unwrap() > 0.0);
    }

    #[test]
    fn gaussian_stream_is_reproducible(seed in any::<u64>(), n in 1usize..256) {
        let a: Tensor<f64> = gaussian(&mut Rng::new(seed), &[n]).unwrap();
        let b: Tensor<f64> = gaussian(&mut Rng::new(seed), &[n]).unwrap();
        prop_assert_eq!(a.to_le_bytes(), b.to_le_bytes());
    }

    #[test]
    fn shape_mismatch_never_broadcasts(n in 1usize..16, m in 1usize..16) {
        prop_assume!(n != m);
        let a = Tensor::<f64>::zeros(&[n]).unwrap();
        let b = Tensor::<f64>::zeros(&[m]).unwrap();
        prop_assert!(residual(&a, &b).is_err());
        prop_assert!(combine(&a, &b).is_err());
        prop_assert!(training_loss(&a, &b).is_err());
    }

    #[test]
    fn scenes_are_pure_functions_of_spec_and_index(seed in any::<u64>(), index in any::<u64>()) {
        let spec = ShapeSceneSpec { seed, ..ShapeSceneSpec::default() };
        let a = render_scene(&spec, index).unwrap();
        let b = render_scene(&spec, index).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>()) {
        let cfg = UNetConfig {
            base_channels: 4,
            channel_mults: vec![1, 2],
            groups: 2,
            time_embed_dim: Some(8),
        };
        let d = Denoiser::<f32>::new(&cfg, 1, 1, 10, &mut Rng::new(seed)).unwrap();
        let bytes = denoiser_checkpoint("seed = 1".into(), 8, 8, &d).to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap().into_denoiser().unwrap();
        prop_assert_eq!(back.params.digest(), d.params.digest());
        prop_assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
    }
}
