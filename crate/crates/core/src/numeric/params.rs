use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use super::{Real, Rng, Tensor};
use crate::error::{Error, Result};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to one named parameter block inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    pub(crate) store: u64,
    pub(crate) index: usize,
}

#[derive(Clone, Debug)]
pub struct ParamBlock<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named parameter blocks of one model. Flattening concatenates blocks in
/// registration order; [`Gradient`] uses the same layout.
#[derive(Debug)]
pub struct ParamStore<T> {
    id: u64,
    blocks: Vec<ParamBlock<T>>,
    frozen: bool,
}

impl<T: Real> Clone for ParamStore<T> {
    /// Clones get a fresh identity so gradients never alias across copies.
    fn clone(&self) -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            blocks: self.blocks.clone(),
            frozen: self.frozen,
        }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            blocks: Vec::new(),
            frozen: false,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.blocks.push(ParamBlock {
            name: name.into(),
            value,
        });
        ParamId {
            store: self.id,
            index: self.blocks.len() - 1,
        }
    }

    /// Uniform(-bound, bound) initialisation with `bound = gain / sqrt(fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let bound = gain / (fan_in as f64).sqrt();
        let mut t = Tensor::zeros(shape)?;
        for x in t.data_mut() {
            *x = T::from_f64(rng.uniform_in(-bound, bound));
        }
        Ok(self.add(name, t))
    }

    pub fn add_constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId> {
        Ok(self.add(name, Tensor::full(shape, T::from_f64(value))?))
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn blocks(&self) -> &[ParamBlock<T>] {
        &self.blocks
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        assert_eq!(id.store, self.id, "parameter handle from another store");
        &self.blocks[id.index].value
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for b in &self.blocks {
            out.extend_from_slice(b.value.data());
        }
        out
    }

    /// Mutable view for the optimizer; refused once frozen.
    pub fn blocks_mut(&mut self) -> Result<&mut [ParamBlock<T>]> {
        if self.frozen {
            return Err(Error::Frozen("parameters of a frozen model cannot be mutated".into()));
        }
        Ok(&mut self.blocks)
    }

    /// Replace a block's contents by name, e.g. when loading a checkpoint.
    pub fn load_block(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen(format!("cannot load {name} into a frozen store")));
        }
        let block = self
            .blocks
            .iter_mut()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter block {name:?}")))?;
        if block.value.shape() != value.shape() {
            return Err(Error::shape("load_block", block.value.shape(), value.shape()));
        }
        block.value = value;
        Ok(())
    }

    /// SHA-256 over every block's name and bytes.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for b in &self.blocks {
            h.update(b.name.as_bytes());
            h.update(b.value.digest());
        }
        h.finalize().into()
    }
}

/// Parameter-aligned flat gradient of one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient<T> {
    pub(crate) store: u64,
    pub data: Vec<T>,
}

impl<T: Real> Gradient<T> {
    pub fn zeros_for(store: &ParamStore<T>) -> Self {
        Gradient {
            store: store.id(),
            data: vec![T::zero(); store.num_params()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()
    }
}
