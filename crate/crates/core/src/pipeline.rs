//! Residual construction, ensemble combination, and the training and
//! inference loops that tie the frozen end-to-end learner to the
//! diffusion learner.

use std::collections::HashMap;
use std::time::Instant;

use crate::data::{stack, Dataset, Item, Split, Task};
use crate::diffusion::{q_sample_closed_batch, sample, TimeStep};
use crate::error::{Error, Result};
use crate::models::{random_batch, Denoiser, E2EModel, LogRecord, Plateau, TrainConfig, TrainReport};
use crate::numeric::{gaussian, Adam, Graph, ParamStore, Real, Rng, Tensor};
use crate::schedule::Schedule;

/// `R = x_hat - x0`.
pub fn residual<T: Real>(x_hat: &Tensor<T>, x0: &Tensor<T>) -> Result<Tensor<T>> {
    x_hat.zip_with(x0, "residual", |a, b| a - b)
}

/// `x_bar = x0 - R`, the reflection of `x_hat` about the ground truth.
pub fn residual_target<T: Real>(x0: &Tensor<T>, r: &Tensor<T>) -> Result<Tensor<T>> {
    x0.zip_with(r, "residual_target", |a, b| a - b)
}

/// `(x_bar + x_hat) / 2`.
pub fn combine<T: Real>(x_bar: &Tensor<T>, x_hat: &Tensor<T>) -> Result<Tensor<T>> {
    let half = T::from_f64(0.5);
    x_bar.zip_with(x_hat, "combine", |a, b| (a + b) * half)
}

/// Restoration residual `R = I0 - x0`; no end-to-end learner involved.
pub fn direct_residual<T: Real>(image: &Tensor<T>, x0: &Tensor<T>) -> Result<Tensor<T>> {
    image.zip_with(x0, "direct_residual", |a, b| a - b)
}

/// Every quantity of one training example, built from `(I0, x0, x_hat)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualSample<T> {
    pub image: Tensor<T>,
    pub x0: Tensor<T>,
    pub x_hat: Tensor<T>,
    pub r: Tensor<T>,
    pub x_bar: Tensor<T>,
}

impl<T: Real> ResidualSample<T> {
    pub fn new(image: Tensor<T>, x0: Tensor<T>, x_hat: Tensor<T>) -> Result<Self> {
        let r = residual(&x_hat, &x0)?;
        let x_bar = residual_target(&x0, &r)?;
        Ok(ResidualSample {
            image,
            x0,
            x_hat,
            r,
            x_bar,
        })
    }

    /// Restoration reading: `x_hat := I0`, so `R = I0 - x0`.
    pub fn restoration(image: Tensor<T>, x0: Tensor<T>) -> Result<Self> {
        let r = direct_residual(&image, &x0)?;
        let x_bar = residual_target(&x0, &r)?;
        Ok(ResidualSample {
            x_hat: image.clone(),
            image,
            x0,
            r,
            x_bar,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleOutput<T> {
    pub x_hat: Tensor<T>,
    pub x_bar: Tensor<T>,
    pub combined: Tensor<T>,
}

/// `x_hat` cache keyed by the content digest of the input image. The
/// end-to-end learner is frozen, so its output is a pure function of `I0`.
pub struct XHatCache<T> {
    map: HashMap<[u8; 32], Tensor<T>>,
    pub hits: u64,
    pub misses: u64,
}

impl<T: Real> Default for XHatCache<T> {
    fn default() -> Self {
        XHatCache {
            map: HashMap::new(),
            hits: 0,
            misses: 0,
        }
    }
}

impl<T: Real> XHatCache<T> {
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Compute `x_hat` for every item not yet cached, in batches.
    pub fn warm(&mut self, model: &E2EModel<T>, items: &[&Item<T>], batch: usize) -> Result<()> {
        let missing: Vec<usize> = (0..items.len())
            .filter(|&i| !self.map.contains_key(&items[i].image.digest()))
            .collect();
        for chunk in missing.chunks(batch.max(1)) {
            let (img, _) = stack(items, chunk)?;
            let out = model.predict(&img)?;
            for (j, &i) in chunk.iter().enumerate() {
                self.misses += 1;
                self.map.insert(items[i].image.digest(), out.slice_batch(j, 1)?.reshape(items[i].image.shape())?);
            }
        }
        Ok(())
    }

    pub fn get_or_compute(&mut self, model: &E2EModel<T>, item: &Item<T>) -> Result<Tensor<T>> {
        let key = item.image.digest();
        if let Some(v) = self.map.get(&key) {
            self.hits += 1;
            return Ok(v.clone());
        }
        self.misses += 1;
        let mut shape = vec![1];
        shape.extend_from_slice(item.image.shape());
        let out = model.predict(&item.image.clone().reshape(&shape)?)?;
        let out = out.reshape(item.image.shape())?;
        self.map.insert(key, out.clone());
        Ok(out)
    }

    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            return 0.0;
        }
        self.hits as f64 / total as f64
    }
}

#[derive(Debug, Default)]
pub struct DiffusionReport {
    pub train: TrainReport,
    /// Cache statistics gathered during the step loop only (after warm-up).
    pub cache_hits: u64,
    pub cache_misses: u64,
}

/// Which learner supplies `x_hat` for a batch.
enum Reference<'a, T> {
    E2E(&'a E2EModel<T>, XHatCache<T>),
    Input,
}

impl<T: Real> Reference<'_, T> {
    fn x_hat(&mut self, items: &[&Item<T>], idx: &[usize], images: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Reference::E2E(model, cache) => {
                let parts = idx
                    .iter()
                    .map(|&i| cache.get_or_compute(model, items[i]))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&Tensor<T>> = parts.iter().collect();
                Tensor::concat_batch(&refs)?.reshape(images.shape())
            }
            Reference::Input => Ok(images.clone()),
        }
    }
}

/// Fixed-noise validation objective, so successive evaluations are comparable.
struct ValidationSet<T> {
    cond: Tensor<T>,
    x_bar: Tensor<T>,
    eps: Tensor<T>,
    ts: Vec<usize>,
}

fn diffusion_batch_loss<T: Real>(
    d: &Denoiser<T>,
    cond: &Tensor<T>,
    x_bar: &Tensor<T>,
    eps: &Tensor<T>,
    ts: &[usize],
    s: &Schedule,
    train: bool,
) -> Result<(f64, Option<crate::numeric::Gradient<T>>)> {
    let steps: Vec<TimeStep> = ts.iter().map(|&t| TimeStep::new(t, s)).collect::<Result<_>>()?;
    let x_t = q_sample_closed_batch(x_bar, &steps, eps, s)?;
    let mut g = if train { Graph::new() } else { Graph::inference() };
    let xn = g.constant(x_t);
    let cn = g.constant(cond.clone());
    let target = g.constant(eps.clone());
    let pred = d.forward(&mut g, xn, cn, ts)?;
    let loss = g.mse_loss(pred, target)?;
    let value = g.value(loss).item().as_f64();
    if !train {
        return Ok((value, None));
    }
    let grad = g.backward(loss)?.for_store(&d.params);
    Ok((value, grad))
}

/// Train the noise predictor on the residual target.
///
/// With `e2e = Some(model)` the model must already be frozen and
/// `x_bar = 2 x0 - E2E(I0)`. With `None` the dataset must be a restoration
/// set and `x_bar = 2 x0 - I0`.
pub fn train_diffusion<T: Real>(
    d: &mut Denoiser<T>,
    e2e: Option<&E2EModel<T>>,
    data: &Dataset<T>,
    s: &Schedule,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<DiffusionReport> {
    config.validate()?;
    if d.max_t() != s.steps() {
        return Err(Error::InvalidArgument(format!(
            "denoiser built for T = {} but schedule has T = {}",
            d.max_t(),
            s.steps()
        )));
    }
    let train = data.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Dataset("empty training split".into()));
    }
    let val = data.split(Split::Val);
    let mut reference = match e2e {
        Some(m) if !m.is_frozen() => {
            return Err(Error::InvalidArgument(
                "the end-to-end model must be frozen before diffusion training".into(),
            ))
        }
        Some(m) => {
            let mut cache = XHatCache::default();
            cache.warm(m, &train, 128)?;
            Reference::E2E(m, cache)
        }
        None if data.task == Task::Restoration => Reference::Input,
        None => {
            return Err(Error::InvalidArgument(
                "segmentation training requires a frozen end-to-end model".into(),
            ))
        }
    };
    let validation = if val.is_empty() || config.eval_every == 0 {
        None
    } else {
        let mut vrng = rng.fork(0x7661_6c69);
        let idx: Vec<usize> = (0..val.len()).collect();
        let (cond, x0) = stack(&val, &idx)?;
        let x_hat = reference.x_hat(&val, &idx, &cond)?;
        let x_bar = residual_target(&x0, &residual(&x_hat, &x0)?)?;
        let eps = gaussian(&mut vrng, x_bar.shape())?;
        let ts = (0..val.len()).map(|_| vrng.int_in(1, s.steps())).collect();
        Some(ValidationSet { cond, x_bar, eps, ts })
    };

    // Warm-up covers the training split and the validation set.
    let (warm_hits, warm_misses) = match &reference {
        Reference::E2E(_, c) => (c.hits, c.misses),
        Reference::Input => (0, 0),
    };

    let mut adam = Adam::new(config.adam);
    let mut plateau = Plateau::new(config.patience);
    let mut best: Option<ParamStore<T>> = None;
    let mut report = DiffusionReport::default();
    let start = Instant::now();

    for step in 1..=config.steps {
        let idx = random_batch(rng, train.len(), config.batch_size);
        let (cond, x0) = stack(&train, &idx)?;
        let x_hat = reference.x_hat(&train, &idx, &cond)?;
        let r = residual(&x_hat, &x0)?;
        let x_bar = residual_target(&x0, &r)?;
        if matches!(reference, Reference::Input) {
            debug_assert!(
                x_bar.max_abs_diff(&x0.axpby(T::from_f64(2.0), &cond, -T::one())?)? < 1e-5,
                "restoration target must equal 2 x0 - I0"
            );
        }
        let ts: Vec<usize> = (0..idx.len()).map(|_| rng.int_in(1, s.steps())).collect();
        let eps = gaussian(rng, x_bar.shape())?;
        let (loss, grad) = diffusion_batch_loss(d, &cond, &x_bar, &eps, &ts, s, true)?;
        let grad = grad.ok_or_else(|| Error::Frozen("denoiser has no trainable parameters".into()))?;
        adam.step(&mut d.params, &grad)?;
        report.train.steps_run = step;

        let mut record = LogRecord {
            step,
            loss,
            val_loss: None,
            wall_time: start.elapsed().as_secs_f64(),
        };
        let eval = config.eval_every > 0 && (step % config.eval_every == 0 || step == config.steps);
        let mut stop = false;
        if let (true, Some(v)) = (eval, &validation) {
            let mut total = 0.0;
            let n = v.cond.batch();
            let chunk = config.batch_size.max(64);
            let mut i = 0;
            while i < n {
                let c = chunk.min(n - i);
                let (l, _) = diffusion_batch_loss(
                    d,
                    &v.cond.slice_batch(i, c)?,
                    &v.x_bar.slice_batch(i, c)?,
                    &v.eps.slice_batch(i, c)?,
                    &v.ts[i..i + c],
                    s,
                    false,
                )?;
                total += l * c as f64;
                i += c;
            }
            let vl = total / n as f64;
            record.val_loss = Some(vl);
            let (improved, should_stop) = plateau.observe(vl);
            if improved {
                best = Some(d.params.clone());
            }
            stop = should_stop;
        }
        report.train.log.push(record);
        if stop {
            report.train.stopped_early = true;
            break;
        }
    }
    if let Some(b) = best {
        for block in b.blocks() {
            d.params.load_block(&block.name, block.value.clone())?;
        }
    }
    report.train.best_val_loss = plateau.best();
    if let Reference::E2E(_, cache) = &reference {
        report.cache_hits = cache.hits - warm_hits;
        report.cache_misses = cache.misses - warm_misses;
    }
    Ok(report)
}

/// Sample `x_bar` for a batch of inputs and combine it with `x_hat`.
/// In restoration mode (`task = Restoration`, no model) `x_hat := I0`.
pub fn infer<T: Real>(
    d: &Denoiser<T>,
    e2e: Option<&E2EModel<T>>,
    task: Task,
    images: &Tensor<T>,
    s: &Schedule,
    rng: &mut Rng,
) -> Result<EnsembleOutput<T>> {
    let x_hat = match (task, e2e) {
        (Task::Segmentation, Some(m)) => m.predict(images)?,
        (Task::Segmentation, None) => {
            return Err(Error::InvalidArgument(
                "segmentation inference requires the end-to-end model".into(),
            ))
        }
        (Task::Restoration, _) => images.clone(),
    };
    let x_bar = sample(d, images, s, rng)?;
    let combined = combine(&x_bar, &x_hat)?;
    Ok(EnsembleOutput {
        x_hat,
        x_bar,
        combined,
    })
}
