//! The conditional noise predictor and the frozen end-to-end learner.

mod layers;
mod unet;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use layers::sinusoidal_embedding;
pub use unet::UNetConfig;
use unet::UNet;

use crate::data::{stack, Dataset, Split};
use crate::diffusion::{NoisePredictor, TimeStep};
use crate::error::{Error, Result};
use crate::numeric::{Adam, AdamConfig, Graph, NodeId, ParamStore, Real, Rng, Tensor};

/// `eps_theta(x_t, I0, t)`: the condition image is concatenated onto the
/// state along the channel axis at the input.
pub struct Denoiser<T> {
    net: UNet,
    pub params: ParamStore<T>,
    state_channels: usize,
    cond_channels: usize,
    max_t: usize,
}

impl<T: Real> Denoiser<T> {
    pub fn new(
        config: &UNetConfig,
        state_channels: usize,
        cond_channels: usize,
        max_t: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if config.time_embed_dim.is_none() {
            return Err(Error::Config("denoiser requires time_embed_dim".into()));
        }
        let mut params = ParamStore::new();
        let net = UNet::new(&mut params, config, state_channels + cond_channels, state_channels, rng)?;
        Ok(Denoiser {
            net,
            params,
            state_channels,
            cond_channels,
            max_t,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.net.config
    }

    pub fn max_t(&self) -> usize {
        self.max_t
    }

    pub fn state_channels(&self) -> usize {
        self.state_channels
    }

    pub fn cond_channels(&self) -> usize {
        self.cond_channels
    }

    fn check_inputs(&self, xs: &[usize], cs: &[usize], ts: &[usize]) -> Result<()> {
        if xs.len() != 4 || cs.len() != 4 || xs[0] != cs[0] || xs[2..] != cs[2..] {
            return Err(Error::shape("denoiser_forward", xs, cs));
        }
        if xs[1] != self.state_channels || cs[1] != self.cond_channels {
            return Err(Error::shape(
                "denoiser_forward channels",
                xs,
                &[xs[0], self.state_channels, xs[2], xs[3]],
            ));
        }
        if let Some(&bad) = ts.iter().find(|&&t| t == 0 || t > self.max_t) {
            return Err(Error::TimestepOutOfRange { t: bad, max: self.max_t });
        }
        Ok(())
    }

    /// Differentiable forward on an existing graph.
    pub fn forward(&self, g: &mut Graph<T>, x_t: NodeId, cond: NodeId, ts: &[usize]) -> Result<NodeId> {
        self.check_inputs(g.shape(x_t), g.shape(cond), ts)?;
        let input = g.concat_channels(x_t, cond)?;
        self.net.forward(g, &self.params, input, Some(ts))
    }
}

impl<T: Real> NoisePredictor<T> for Denoiser<T> {
    fn predict(&self, x_t: &Tensor<T>, cond: &Tensor<T>, t: TimeStep) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.constant(x_t.clone());
        let c = g.constant(cond.clone());
        let ts = vec![t.get(); x_t.batch()];
        let out = self.forward(&mut g, x, c, &ts)?;
        Ok(g.value(out).clone())
    }

    fn state_shape(&self, cond_shape: &[usize]) -> Result<Vec<usize>> {
        if cond_shape.len() != 4 || cond_shape[1] != self.cond_channels {
            return Err(Error::shape("state_shape", cond_shape, &[0, self.cond_channels, 0, 0]));
        }
        Ok(vec![cond_shape[0], self.state_channels, cond_shape[2], cond_shape[3]])
    }
}

/// Supervised segmentation / regression learner with a `tanh` head so its
/// output `2p - 1` lives in `[-1, 1]`.
pub struct E2EModel<T> {
    net: UNet,
    pub params: ParamStore<T>,
    out_channels: usize,
    height: usize,
    width: usize,
}

impl<T: Real> E2EModel<T> {
    pub fn new(
        config: &UNetConfig,
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let config = UNetConfig {
            time_embed_dim: None,
            ..config.clone()
        };
        let mut params = ParamStore::new();
        let net = UNet::new(&mut params, &config, in_channels, out_channels, rng)?;
        net.check_spatial(height, width)?;
        Ok(E2EModel {
            net,
            params,
            out_channels,
            height,
            width,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.net.config
    }

    pub fn in_channels(&self) -> usize {
        self.net.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    /// Disables parameter mutation and gradient flow for good.
    pub fn freeze(mut self) -> Self {
        self.params.freeze();
        self
    }

    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.net.in_channels, self.height, self.width]
    }

    pub fn forward(&self, g: &mut Graph<T>, image: NodeId) -> Result<NodeId> {
        let s = g.shape(image).to_vec();
        if s.len() != 4 || s[1..] != self.input_shape(1)[1..] {
            return Err(Error::shape("e2e_forward", &s, &self.input_shape(s.first().copied().unwrap_or(1))));
        }
        let logits = self.net.forward(g, &self.params, image, None)?;
        Ok(g.tanh(logits))
    }

    /// `x_hat = E2E(I0)`; pure in `(params, image)`.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, x)?;
        Ok(g.value(out).clone())
    }
}

/// Step budget, batch size, optimizer and early stopping of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Evaluate validation loss every this many steps (0 disables).
    #[serde(default)]
    pub eval_every: usize,
    /// Stop after this many evaluations without improvement (0 disables).
    #[serde(default)]
    pub patience: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training-metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    pub wall_time: f64,
}

impl LogRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogRecord>,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub best_val_loss: Option<f64>,
}

/// Early-stopping bookkeeping shared by both training loops.
pub(crate) struct Plateau {
    patience: usize,
    best: f64,
    bad: usize,
}

impl Plateau {
    pub fn new(patience: usize) -> Self {
        Plateau {
            patience,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Records a validation loss; returns `(improved, should_stop)`.
    pub fn observe(&mut self, val: f64) -> (bool, bool) {
        if val < self.best {
            self.best = val;
            self.bad = 0;
            (true, false)
        } else {
            self.bad += 1;
            (false, self.patience > 0 && self.bad >= self.patience)
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best.is_finite().then_some(self.best)
    }
}

pub(crate) fn random_batch(rng: &mut Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.int_in(0, n - 1)).collect()
}

/// Mean per-pixel loss of the model over `items`, in chunks of `batch`.
pub fn e2e_loss<T: Real>(model: &E2EModel<T>, items: &[&crate::data::Item<T>], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in (0..items.len()).collect::<Vec<_>>().chunks(batch) {
        let (img, tgt) = stack(items, chunk)?;
        let pred = model.predict(&img)?;
        total += crate::diffusion::training_loss(&pred, &tgt)? * chunk.len() as f64;
    }
    Ok(total / items.len() as f64)
}

/// Per-pixel regression of the `tanh` head onto the encoded mask.
/// Keeps the parameters with the best validation loss when a validation
/// split is present.
pub fn train_e2e<T: Real>(
    model: &mut E2EModel<T>,
    data: &Dataset<T>,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainReport> {
    config.validate()?;
    if model.is_frozen() {
        return Err(Error::Frozen("cannot train a frozen end-to-end model".into()));
    }
    let train = data.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Dataset("empty training split".into()));
    }
    let val = data.split(Split::Val);
    let mut adam = Adam::new(config.adam);
    let mut plateau = Plateau::new(config.patience);
    let mut best: Option<ParamStore<T>> = None;
    let mut report = TrainReport::default();
    let start = Instant::now();

    for step in 1..=config.steps {
        let idx = random_batch(rng, train.len(), config.batch_size);
        let (img, tgt) = stack(&train, &idx)?;
        let mut g = Graph::new();
        let x = g.constant(img);
        let y = g.constant(tgt);
        let pred = model.forward(&mut g, x)?;
        let loss = g.mse_loss(pred, y)?;
        let loss_value = g.value(loss).item().as_f64();
        let grad = g
            .backward(loss)?
            .for_store(&model.params)
            .ok_or_else(|| Error::Frozen("no trainable parameters reached".into()))?;
        adam.step(&mut model.params, &grad)?;
        report.steps_run = step;

        let eval = config.eval_every > 0 && (step % config.eval_every == 0 || step == config.steps);
        let mut record = LogRecord {
            step,
            loss: loss_value,
            val_loss: None,
            wall_time: start.elapsed().as_secs_f64(),
        };
        if eval && !val.is_empty() {
            let v = e2e_loss(model, &val, config.batch_size.max(64))?;
            record.val_loss = Some(v);
            let (improved, stop) = plateau.observe(v);
            if improved {
                best = Some(model.params.clone());
            }
            report.log.push(record);
            if stop {
                report.stopped_early = true;
                break;
            }
        } else {
            report.log.push(record);
        }
    }
    if let Some(b) = best {
        for block in b.blocks() {
            model.params.load_block(&block.name, block.value.clone())?;
        }
    }
    report.best_val_loss = plateau.best();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gaussian;

    fn small() -> UNetConfig {
        UNetConfig {
            base_channels: 4,
            channel_mults: vec![1, 2],
            groups: 2,
            time_embed_dim: Some(8),
        }
    }

    #[test]
    fn denoiser_output_matches_state_shape() {
        let mut rng = Rng::new(0);
        let d = Denoiser::<f64>::new(&small(), 1, 1, 10, &mut rng).unwrap();
        let x = gaussian::<f64>(&mut rng, &[3, 1, 8, 8]).unwrap();
        let c = gaussian::<f64>(&mut rng, &[3, 1, 8, 8]).unwrap();
        let s = crate::schedule::Schedule::new(10).unwrap();
        let out = d.predict(&x, &c, TimeStep::new(4, &s).unwrap()).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert!(out.all_finite());
    }

    #[test]
    fn denoiser_rejects_bad_inputs() {
        let mut rng = Rng::new(0);
        let d = Denoiser::<f64>::new(&small(), 1, 1, 10, &mut rng).unwrap();
        let mut g = Graph::inference();
        let x = g.constant(Tensor::zeros(&[1, 1, 8, 8]).unwrap());
        let c = g.constant(Tensor::zeros(&[1, 1, 4, 4]).unwrap());
        assert!(d.forward(&mut g, x, c, &[1]).is_err());
        let c = g.constant(Tensor::zeros(&[1, 1, 8, 8]).unwrap());
        assert!(matches!(d.forward(&mut g, x, c, &[11]), Err(Error::TimestepOutOfRange { .. })));
        assert!(d.forward(&mut g, x, c, &[0]).is_err());
        let odd = g.constant(Tensor::zeros(&[1, 1, 7, 7]).unwrap());
        assert!(d.forward(&mut g, odd, odd, &[1]).is_err());
    }

    #[test]
    fn time_embedding_is_live() {
        let mut rng = Rng::new(5);
        let d = Denoiser::<f64>::new(&small(), 1, 1, 100, &mut rng).unwrap();
        let x = gaussian::<f64>(&mut rng, &[1, 1, 8, 8]).unwrap();
        let c = gaussian::<f64>(&mut rng, &[1, 1, 8, 8]).unwrap();
        let s = crate::schedule::Schedule::new(100).unwrap();
        let a = d.predict(&x, &c, TimeStep::new(1, &s).unwrap()).unwrap();
        let b = d.predict(&x, &c, TimeStep::new(100, &s).unwrap()).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 0.0);
    }

    #[test]
    fn outputs_stay_finite_for_bounded_inputs() {
        let mut rng = Rng::new(6);
        let d = Denoiser::<f32>::new(&small(), 1, 1, 100, &mut rng).unwrap();
        let s = crate::schedule::Schedule::new(100).unwrap();
        for scale in [0.0, 1.0, 10.0] {
            let x = Tensor::<f32>::full(&[2, 1, 8, 8], scale).unwrap();
            let c = Tensor::<f32>::full(&[2, 1, 8, 8], -scale).unwrap();
            for t in [1, 50, 100] {
                let out = d.predict(&x, &c, TimeStep::new(t, &s).unwrap()).unwrap();
                assert!(out.all_finite());
            }
        }
    }

    #[test]
    fn e2e_is_pure_and_bounded() {
        let mut rng = Rng::new(8);
        let m = E2EModel::<f32>::new(&small(), 1, 1, 8, 8, &mut rng).unwrap();
        let img = gaussian::<f32>(&mut rng, &[4, 1, 8, 8]).unwrap().scale(5.0);
        let a = m.predict(&img).unwrap();
        let b = m.predict(&img).unwrap();
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let frozen = m.freeze();
        assert_eq!(frozen.predict(&img).unwrap(), a);
        assert!(frozen.predict(&Tensor::zeros(&[1, 1, 4, 4]).unwrap()).is_err());
    }

    #[test]
    fn frozen_e2e_receives_no_gradient() {
        let mut rng = Rng::new(9);
        let m = E2EModel::<f64>::new(&small(), 1, 1, 8, 8, &mut rng).unwrap().freeze();
        let img = gaussian::<f64>(&mut rng, &[2, 1, 8, 8]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let y = m.forward(&mut g, x).unwrap();
        let tgt = g.constant(img);
        let loss = g.mse_loss(y, tgt).unwrap();
        assert!(g.backward(loss).unwrap().for_store(&m.params).is_none());
    }

    #[test]
    fn sinusoidal_embedding_layout() {
        let e = sinusoidal_embedding(0.0, 6);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let e = sinusoidal_embedding(3.0, 4);
        assert!((e[0] - 3f64.sin()).abs() < 1e-15);
        assert!((e[2] - 3f64.cos()).abs() < 1e-15);
        assert!((e[1] - (3.0 * 0.01f64).sin()).abs() < 1e-15);
    }
}
