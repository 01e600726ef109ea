use serde::{Deserialize, Serialize};

use super::layers::{sinusoidal_embedding, Conv, GroupNorm, Linear, ResBlock};
use crate::error::{Error, Result};
use crate::numeric::{Graph, NodeId, ParamStore, Real, Rng, Tensor};

/// Encoder-decoder hyperparameters shared by the denoiser and the
/// end-to-end learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub base_channels: usize,
    /// One entry per resolution level; `len - 1` downsamplings.
    pub channel_mults: Vec<usize>,
    pub groups: usize,
    /// Sinusoidal embedding width; `None` builds an unconditional-in-time net.
    #[serde(default)]
    pub time_embed_dim: Option<usize>,
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return Err(Error::Config("unet: base_channels and channel_mults must be positive".into()));
        }
        if let Some(d) = self.time_embed_dim {
            if d == 0 || d % 2 != 0 {
                return Err(Error::Config(format!("unet: time_embed_dim {d} must be positive and even")));
            }
        }
        Ok(())
    }
}

pub(crate) struct TimeEmbed {
    dim: usize,
    fc1: Linear,
    fc2: Linear,
}

pub(crate) struct UNet {
    pub config: UNetConfig,
    pub in_channels: usize,
    time: Option<TimeEmbed>,
    conv_in: Conv,
    down: Vec<ResBlock>,
    downsample: Vec<Conv>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    norm_out: GroupNorm,
    conv_out: Conv,
}

impl UNet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        config: &UNetConfig,
        in_channels: usize,
        out_channels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let base = config.base_channels;
        let groups = config.groups;
        let time = match config.time_embed_dim {
            Some(dim) => Some(TimeEmbed {
                dim,
                fc1: Linear::new(store, "time.fc1", dim, 4 * dim, rng)?,
                fc2: Linear::new(store, "time.fc2", 4 * dim, 4 * dim, rng)?,
            }),
            None => None,
        };
        let tdim = config.time_embed_dim.map(|d| 4 * d);
        let chans: Vec<usize> = config.channel_mults.iter().map(|m| m * base).collect();
        let conv_in = Conv::new(store, "conv_in", in_channels, base, 3, 1, rng)?;

        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut cur = base;
        for (i, &c) in chans.iter().enumerate() {
            down.push(ResBlock::new(store, &format!("down{i}"), cur, c, groups, tdim, rng)?);
            cur = c;
            if i + 1 < chans.len() {
                downsample.push(Conv::new(store, &format!("downsample{i}"), c, c, 3, 2, rng)?);
            }
        }
        let mid = ResBlock::new(store, "mid", cur, cur, groups, tdim, rng)?;
        let mut up = Vec::new();
        for (i, &c) in chans.iter().enumerate().rev() {
            up.push(ResBlock::new(store, &format!("up{i}"), cur + c, c, groups, tdim, rng)?);
            cur = c;
        }
        let norm_out = GroupNorm::new(store, "norm_out", cur, groups)?;
        let conv_out = Conv::new(store, "conv_out", cur, out_channels, 3, 1, rng)?;
        Ok(UNet {
            config: config.clone(),
            in_channels,
            time,
            conv_in,
            down,
            downsample,
            mid,
            up,
            norm_out,
            conv_out,
        })
    }

    /// Spatial sizes must survive `levels - 1` halvings.
    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let f = 1 << (self.config.levels() - 1);
        if h % f != 0 || w % f != 0 {
            return Err(Error::InvalidArgument(format!(
                "spatial size {h}x{w} must be divisible by {f} for {} levels",
                self.config.levels()
            )));
        }
        Ok(())
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        x: NodeId,
        timesteps: Option<&[usize]>,
    ) -> Result<NodeId> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != self.in_channels {
            return Err(Error::shape("unet input", &xs, &[xs.first().copied().unwrap_or(0), self.in_channels]));
        }
        self.check_spatial(xs[2], xs[3])?;

        let temb = match (&self.time, timesteps) {
            (Some(te), Some(ts)) => {
                if ts.len() != xs[0] {
                    return Err(Error::InvalidArgument(format!(
                        "{} timesteps for a batch of {}",
                        ts.len(),
                        xs[0]
                    )));
                }
                let mut flat = Vec::with_capacity(ts.len() * te.dim);
                for &t in ts {
                    flat.extend(sinusoidal_embedding(t as f64, te.dim).into_iter().map(T::from_f64));
                }
                let e = g.constant(Tensor::new(&[ts.len(), te.dim], flat)?);
                let e = te.fc1.forward(g, s, e)?;
                let e = g.silu(e);
                let e = te.fc2.forward(g, s, e)?;
                Some(g.silu(e))
            }
            (None, None) => None,
            (Some(_), None) => return Err(Error::InvalidArgument("time-conditioned net needs timesteps".into())),
            (None, Some(_)) => return Err(Error::InvalidArgument("net has no time embedding".into())),
        };

        let mut h = self.conv_in.forward(g, s, x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (i, block) in self.down.iter().enumerate() {
            h = block.forward(g, s, h, temb)?;
            skips.push(h);
            if let Some(ds) = self.downsample.get(i) {
                h = ds.forward(g, s, h)?;
            }
        }
        h = self.mid.forward(g, s, h, temb)?;
        let levels = self.up.len();
        for (j, block) in self.up.iter().enumerate() {
            let i = levels - 1 - j;
            h = g.concat_channels(h, skips[i])?;
            h = block.forward(g, s, h, temb)?;
            if i > 0 {
                h = g.upsample2(h)?;
            }
        }
        let h = self.norm_out.forward(g, s, h)?;
        let h = g.silu(h);
        self.conv_out.forward(g, s, h)
    }
}
