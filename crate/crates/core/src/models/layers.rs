use crate::error::Result;
use crate::numeric::{Graph, NodeId, ParamId, ParamStore, Real, Rng};

pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fan_in = cin * k * k;
        let w = store.add_uniform(format!("{name}.weight"), &[cout, cin, k, k], fan_in, 3f64.sqrt(), rng)?;
        let b = store.add_constant(format!("{name}.bias"), &[cout], 0.0)?;
        Ok(Conv {
            w,
            b,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut Rng) -> Result<Self> {
        let w = store.add_uniform(format!("{name}.weight"), &[dout, din], din, 3f64.sqrt(), rng)?;
        let b = store.add_constant(format!("{name}.bias"), &[dout], 0.0)?;
        Ok(Linear { w, b })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        g.linear(x, w, b)
    }
}

pub(crate) struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(crate::Error::Config(format!(
                "{name}: {channels} channels are not divisible into {groups} groups"
            )));
        }
        let gamma = store.add_constant(format!("{name}.gamma"), &[channels], 1.0)?;
        let beta = store.add_constant(format!("{name}.beta"), &[channels], 0.0)?;
        Ok(GroupNorm { gamma, beta, groups })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(s, self.gamma);
        let beta = g.param(s, self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// Pre-norm residual block; the time embedding, when present, is projected
/// to a per-channel shift between the two convolutions.
pub(crate) struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    time_proj: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        groups: usize,
        time_dim: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(ResBlock {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cin, groups)?,
            conv1: Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, rng)?,
            time_proj: time_dim
                .map(|d| Linear::new(store, &format!("{name}.time_proj"), d, cout, rng))
                .transpose()?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cout, groups)?,
            conv2: Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, rng)?,
            skip: (cin != cout)
                .then(|| Conv::new(store, &format!("{name}.skip"), cin, cout, 1, 1, rng))
                .transpose()?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        x: NodeId,
        temb: Option<NodeId>,
    ) -> Result<NodeId> {
        let h = self.norm1.forward(g, s, x)?;
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, s, h)?;
        if let (Some(proj), Some(e)) = (&self.time_proj, temb) {
            let shift = proj.forward(g, s, e)?;
            h = g.add_per_sample_channel(h, shift)?;
        }
        let h = self.norm2.forward(g, s, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, s, h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(g, s, x)?,
            None => x,
        };
        g.add(h, skip)
    }
}

/// `[sin(t w_0), .., sin(t w_{h-1}), cos(t w_0), .., cos(t w_{h-1})]` with
/// `w_i = 10000^(-i / h)` and `h = dim / 2`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}
