//! Training-loop behaviour on tiny problems: overfitting, memorization,
//! caching, determinism, freezing and conditioning.

use resddpm::data::{Dataset, Item, ShapeSceneSpec, Split, SplitSizes, Task};
use resddpm::diffusion::{NoisePredictor, TimeStep};
use resddpm::metrics::iou;
use resddpm::models::{e2e_loss, train_e2e, Denoiser, E2EModel, TrainConfig, UNetConfig};
use resddpm::numeric::{gaussian, AdamConfig, Rng, Tensor};
use resddpm::pipeline::train_diffusion;
use resddpm::schedule::Schedule;

fn scene() -> ShapeSceneSpec {
    ShapeSceneSpec {
        fg_intensity: (0.6, 0.9),
        bg_intensity: (0.1, 0.4),
        noise_std: 0.1,
        seed: 11,
        ..ShapeSceneSpec::default()
    }
}

fn net(base: usize, tdim: Option<usize>) -> UNetConfig {
    UNetConfig {
        base_channels: base,
        channel_mults: vec![1, 2],
        groups: 2,
        time_embed_dim: tdim,
    }
}

fn train_cfg(steps: usize, batch: usize, lr: f64, eval_every: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: batch,
        adam: AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        eval_every,
        patience: 0,
    }
}

/// `n` training items, plus the same items tagged as validation so the
/// validation loss measures the fit to the training set itself.
fn memorization_set(task: Task, n: usize) -> Dataset<f32> {
    memorization_set_of(&scene(), task, n)
}

fn memorization_set_of(spec: &ShapeSceneSpec, task: Task, n: usize) -> Dataset<f32> {
    let base = Dataset::<f32>::generate(
        spec,
        task,
        SplitSizes {
            train: n,
            val: 0,
            test: 0,
        },
    )
    .unwrap();
    let mut items = base.items.clone();
    items.extend(base.items.iter().map(|it| Item {
        split: Split::Val,
        ..it.clone()
    }));
    Dataset { task, items }
}

fn trained_e2e(data: &Dataset<f32>, steps: usize) -> E2EModel<f32> {
    let mut rng = Rng::new(3);
    let mut m = E2EModel::new(&net(8, None), 1, 1, 16, 16, &mut rng).unwrap();
    train_e2e(&mut m, data, &train_cfg(steps, 16, 3e-3, 0), &mut rng).unwrap();
    m.freeze()
}

#[test]
fn e2e_overfits_small_set() {
    let data = memorization_set(Task::Segmentation, 32);
    let mut rng = Rng::new(1);
    let mut m = E2EModel::<f32>::new(&net(8, None), 1, 1, 16, 16, &mut rng).unwrap();
    let report = train_e2e(&mut m, &data, &train_cfg(400, 32, 3e-3, 20), &mut rng).unwrap();
    let evals: Vec<f64> = report.log.iter().filter_map(|r| r.val_loss).collect();
    assert_eq!(evals.len(), 20);
    for w in evals[..10].windows(2) {
        assert!(w[1] < w[0], "loss rose between evaluations: {evals:?}");
    }
    let mut rng = Rng::new(1);
    let fresh = E2EModel::<f32>::new(&net(8, None), 1, 1, 16, 16, &mut rng).unwrap();
    let before = e2e_loss(&fresh, &data.split(Split::Train), 32).unwrap();
    let after = *evals.last().unwrap();
    assert!(after < 0.1 * before, "final {after} vs initial {before}");
}

#[test]
fn e2e_memorizes_single_sample() {
    let data = memorization_set(Task::Segmentation, 1);
    let m = trained_e2e(&data, 300);
    let it = &data.items[0];
    let pred = m.predict(&it.image.clone().reshape(&[1, 1, 16, 16]).unwrap()).unwrap();
    let score = iou(&pred, &it.target.clone().reshape(&[1, 1, 16, 16]).unwrap()).unwrap();
    assert!(score > 0.95, "IoU {score}");
}

#[test]
fn diffusion_overfits_small_set() {
    let small = ShapeSceneSpec {
        height: 8,
        width: 8,
        max_shapes: 2,
        ..scene()
    };
    let data = memorization_set_of(&small, Task::Restoration, 16);
    let s = Schedule::new(100).unwrap();
    let mut rng = Rng::new(4);
    let mut d = Denoiser::<f32>::new(&net(16, Some(32)), 1, 1, 100, &mut rng).unwrap();
    let report = train_diffusion(&mut d, None, &data, &s, &train_cfg(4000, 16, 3e-3, 250), &mut rng).unwrap();
    let best = report.train.best_val_loss.unwrap();
    assert!(best < 0.05, "best validation loss {best}");
}

#[test]
fn cached_e2e_outputs_hit_after_warm_up() {
    let data = memorization_set(Task::Segmentation, 8);
    let e2e = trained_e2e(&data, 20);
    let frozen_digest = e2e.params.digest();
    let s = Schedule::new(20).unwrap();
    let run = |seed: u64| {
        let mut rng = Rng::new(seed);
        let mut d = Denoiser::<f32>::new(&net(4, Some(8)), 1, 1, 20, &mut rng).unwrap();
        let report = train_diffusion(&mut d, Some(&e2e), &data, &s, &train_cfg(12, 4, 1e-3, 4), &mut rng).unwrap();
        (d.params.digest(), report)
    };
    let (a, report) = run(9);
    assert_eq!(report.cache_misses, 0);
    assert_eq!(report.cache_hits, 12 * 4);
    assert_eq!(e2e.params.digest(), frozen_digest);
    let (b, _) = run(9);
    assert_eq!(a, b);
    let (c, _) = run(10);
    assert_ne!(a, c);
}

#[test]
fn unfrozen_e2e_is_rejected() {
    let data = memorization_set(Task::Segmentation, 4);
    let mut rng = Rng::new(2);
    let e2e = E2EModel::<f32>::new(&net(4, None), 1, 1, 16, 16, &mut rng).unwrap();
    let s = Schedule::new(10).unwrap();
    let mut d = Denoiser::<f32>::new(&net(4, Some(8)), 1, 1, 10, &mut rng).unwrap();
    assert!(train_diffusion(&mut d, Some(&e2e), &data, &s, &train_cfg(2, 2, 1e-3, 0), &mut rng).is_err());
    assert!(train_diffusion(&mut d, None, &data, &s, &train_cfg(2, 2, 1e-3, 0), &mut rng).is_err());
}

#[test]
fn conditioning_changes_prediction_after_training() {
    let data = memorization_set(Task::Restoration, 8);
    let s = Schedule::new(50).unwrap();
    let mut rng = Rng::new(5);
    let mut d = Denoiser::<f32>::new(&net(8, Some(16)), 1, 1, 50, &mut rng).unwrap();
    train_diffusion(&mut d, None, &data, &s, &train_cfg(100, 8, 1e-3, 0), &mut rng).unwrap();
    let images: Vec<&Tensor<f32>> = data.items[..4].iter().map(|it| &it.image).collect();
    let cond = Tensor::concat_batch(&images).unwrap().reshape(&[4, 1, 16, 16]).unwrap();
    let permuted: Vec<&Tensor<f32>> = [1, 2, 3, 0].iter().map(|&i| images[i]).collect();
    let cond_p = Tensor::concat_batch(&permuted).unwrap().reshape(&[4, 1, 16, 16]).unwrap();
    let x_t = gaussian::<f32>(&mut rng, &[4, 1, 16, 16]).unwrap();
    let t = TimeStep::new(5, &s).unwrap();
    let a = d.predict(&x_t, &cond, t).unwrap();
    let b = d.predict(&x_t, &cond_p, t).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() > 1e-3);
}
