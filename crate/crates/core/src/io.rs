//! On-disk formats: raw tensor files, saved datasets, checkpoints and
//! 8-bit PGM previews.
//!
//! Every binary file is little-endian and starts with an 8-byte magic.
//! Checkpoints end with the SHA-256 of all preceding bytes and are
//! rejected if it does not match.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Item, ShapeSceneSpec, Split, Task};
use crate::error::{Error, Result};
use crate::models::{Denoiser, E2EModel, UNetConfig};
use crate::numeric::{DType, ParamStore, Real, Rng, Tensor};
use crate::schedule::{Schedule, SCHEDULE_ALGORITHM};

pub const TENSOR_MAGIC: &[u8; 8] = b"RSTENS01";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RSDDPM01";
const LITTLE_ENDIAN: u8 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor<T: Real>(&mut self, t: &Tensor<T>) {
        self.u8(T::DTYPE.code());
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        let bytes = t.to_le_bytes();
        self.u64(bytes.len() as u64);
        self.0.extend_from_slice(&bytes);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        let m = format!("{} at byte {}: {msg}", self.what, self.pos);
        if self.what == "checkpoint" {
            Error::Checkpoint(m)
        } else {
            Error::Dataset(m)
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("invalid utf-8"))
    }
    fn tensor<T: Real>(&mut self) -> Result<Tensor<T>> {
        let code = self.u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| self.err(&format!("unknown dtype code {code}")))?;
        if dtype != T::DTYPE {
            return Err(self.err(&format!(
                "precision mismatch: file holds {} but {} was requested",
                dtype.name(),
                T::DTYPE.name()
            )));
        }
        let nd = self.u32()? as usize;
        if nd > 8 {
            return Err(self.err("implausible tensor rank"));
        }
        let shape = (0..nd).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = self.u64()? as usize;
        let bytes = self.take(n)?;
        Tensor::from_le_bytes(&shape, bytes).map_err(|e| self.err(&e.to_string()))
    }
}

/// A single tensor: magic, then dtype, rank, dims and raw values.
pub fn save_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut w = Writer(TENSOR_MAGIC.to_vec());
    w.tensor(t);
    fs::write(path, w.0)?;
    Ok(())
}

pub fn load_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let buf = fs::read(path)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        what: "tensor file",
    };
    if r.take(8)? != TENSOR_MAGIC {
        return Err(r.err("bad magic"));
    }
    let t = r.tensor()?;
    if r.pos != buf.len() {
        return Err(r.err("trailing bytes"));
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub task: Task,
    pub dtype: DType,
    pub scene: ShapeSceneSpec,
    pub indices: Vec<u64>,
    pub splits: Vec<String>,
}

/// Writes `manifest.json` plus `images.rst`, `targets.rst` and, for
/// restoration sets, `corruptions.rst`, each stacked to `[N, 1, H, W]`.
pub fn save_dataset<T: Real>(dir: &Path, data: &Dataset<T>, scene: &ShapeSceneSpec) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Dataset("refusing to save an empty dataset".into()));
    }
    fs::create_dir_all(dir)?;
    let items: Vec<&Item<T>> = data.items.iter().collect();
    let cat = |f: fn(&Item<T>) -> Option<&Tensor<T>>| -> Result<Option<Tensor<T>>> {
        let parts: Option<Vec<&Tensor<T>>> = items.iter().map(|it| f(it)).collect();
        match parts {
            Some(p) => Ok(Some(Tensor::concat_batch(&p)?)),
            None => Ok(None),
        }
    };
    let manifest = DatasetManifest {
        task: data.task,
        dtype: T::DTYPE,
        scene: scene.clone(),
        indices: items.iter().map(|it| it.index).collect(),
        splits: items.iter().map(|it| it.split.name().to_string()).collect(),
    };
    let unbatch = |t: Tensor<T>| {
        let mut s = vec![items.len()];
        s.extend_from_slice(items[0].image.shape());
        t.reshape(&s)
    };
    save_tensor(&dir.join("images.rst"), &unbatch(cat(|it| Some(&it.image))?.unwrap())?)?;
    save_tensor(&dir.join("targets.rst"), &unbatch(cat(|it| Some(&it.target))?.unwrap())?)?;
    if let Some(c) = cat(|it| it.corruption.as_ref())? {
        save_tensor(&dir.join("corruptions.rst"), &unbatch(c)?)?;
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_dataset<T: Real>(dir: &Path) -> Result<Dataset<T>> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::Dataset(format!("cannot read manifest in {}: {e}", dir.display())))?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("bad manifest: {e}")))?;
    if m.dtype != T::DTYPE {
        return Err(Error::Dataset(format!(
            "precision mismatch: dataset stored as {} but {} was requested",
            m.dtype.name(),
            T::DTYPE.name()
        )));
    }
    let images: Tensor<T> = load_tensor(&dir.join("images.rst"))?;
    let targets: Tensor<T> = load_tensor(&dir.join("targets.rst"))?;
    let corr: Option<Tensor<T>> = match m.task {
        Task::Restoration => Some(load_tensor(&dir.join("corruptions.rst"))?),
        Task::Segmentation => None,
    };
    let n = m.indices.len();
    if m.splits.len() != n || images.batch() != n || targets.batch() != n {
        return Err(Error::Dataset("manifest and tensor files disagree on item count".into()));
    }
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let per = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let s = t.slice_batch(i, 1)?;
            let shape = s.shape()[1..].to_vec();
            s.reshape(&shape)
        };
        items.push(Item {
            index: m.indices[i],
            split: m.splits[i].parse::<Split>()?,
            image: per(&images)?,
            target: per(&targets)?,
            corruption: corr.as_ref().map(per).transpose()?,
        });
    }
    let d = Dataset { task: m.task, items };
    d.check_disjoint()?;
    Ok(d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    E2e,
    Denoiser,
}

/// Architecture record needed to rebuild the network before loading weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub kind: ModelKind,
    pub unet: UNetConfig,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    /// TOML of the run configuration that produced the weights.
    pub config: String,
    pub timesteps: usize,
    pub schedule: String,
    pub meta: ModelMeta,
    pub blocks: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn from_store(config: String, timesteps: usize, meta: ModelMeta, store: &ParamStore<T>) -> Self {
        Checkpoint {
            config,
            timesteps,
            schedule: SCHEDULE_ALGORITHM.to_string(),
            meta,
            blocks: store.blocks().iter().map(|b| (b.name.clone(), b.value.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(CHECKPOINT_MAGIC.to_vec());
        w.u8(LITTLE_ENDIAN);
        w.u8(T::DTYPE.code());
        w.str(&self.config);
        w.u64(self.timesteps as u64);
        w.str(&self.schedule);
        w.str(&serde_json::to_string(&self.meta).expect("meta serializes"));
        w.u32(self.blocks.len() as u32);
        for (name, t) in &self.blocks {
            w.str(name);
            w.tensor(t);
        }
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 8 + 32 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        let (body, stored) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != stored {
            return Err(Error::Checkpoint("digest mismatch: file is corrupt or truncated".into()));
        }
        let mut r = Reader {
            buf: body,
            pos: 0,
            what: "checkpoint",
        };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.err("bad magic"));
        }
        if r.u8()? != LITTLE_ENDIAN {
            return Err(r.err("unsupported byte order"));
        }
        let code = r.u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| r.err(&format!("unknown dtype code {code}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "precision mismatch: checkpoint holds {} weights but {} was requested",
                dtype.name(),
                T::DTYPE.name()
            )));
        }
        let config = r.str()?;
        let timesteps = r.u64()? as usize;
        let schedule = r.str()?;
        if schedule != SCHEDULE_ALGORITHM {
            return Err(r.err(&format!("unknown schedule {schedule:?}")));
        }
        let meta_json = r.str()?;
        let meta: ModelMeta =
            serde_json::from_str(&meta_json).map_err(|e| Error::Checkpoint(format!("bad model record: {e}")))?;
        let n = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.str()?;
            blocks.push((name, r.tensor()?));
        }
        if r.pos != body.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Checkpoint {
            config,
            timesteps,
            schedule,
            meta,
            blocks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&buf).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// SHA-256 over the serialized checkpoint (trailer included).
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }

    fn fill(&self, store: &mut ParamStore<T>) -> Result<()> {
        if store.blocks().len() != self.blocks.len() {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: model has {} parameter blocks, checkpoint has {}",
                store.blocks().len(),
                self.blocks.len()
            )));
        }
        for (name, t) in &self.blocks {
            store
                .load_block(name, t.clone())
                .map_err(|e| Error::Checkpoint(format!("block {name}: {e}")))?;
        }
        Ok(())
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.meta.kind
            )));
        }
        Ok(())
    }

    pub fn into_e2e(&self) -> Result<E2EModel<T>> {
        self.expect_kind(ModelKind::E2e)?;
        let m = &self.meta;
        let mut rng = Rng::new(0);
        let mut model = E2EModel::new(&m.unet, m.in_channels, m.out_channels, m.height, m.width, &mut rng)?;
        self.fill(&mut model.params)?;
        Ok(if m.frozen { model.freeze() } else { model })
    }

    pub fn into_denoiser(&self) -> Result<Denoiser<T>> {
        self.expect_kind(ModelKind::Denoiser)?;
        Schedule::new(self.timesteps)?;
        let m = &self.meta;
        let mut rng = Rng::new(0);
        let cond = m.in_channels.checked_sub(m.out_channels).ok_or_else(|| {
            Error::Checkpoint("denoiser record has fewer input than output channels".into())
        })?;
        let mut d = Denoiser::new(&m.unet, m.out_channels, cond, self.timesteps, &mut rng)?;
        self.fill(&mut d.params)?;
        Ok(d)
    }
}

pub fn e2e_checkpoint<T: Real>(config: String, timesteps: usize, model: &E2EModel<T>) -> Checkpoint<T> {
    let meta = ModelMeta {
        kind: ModelKind::E2e,
        unet: model.config().clone(),
        in_channels: model.in_channels(),
        out_channels: model.out_channels(),
        height: model.height(),
        width: model.width(),
        frozen: model.is_frozen(),
    };
    Checkpoint::from_store(config, timesteps, meta, &model.params)
}

pub fn denoiser_checkpoint<T: Real>(
    config: String,
    height: usize,
    width: usize,
    d: &Denoiser<T>,
) -> Checkpoint<T> {
    let meta = ModelMeta {
        kind: ModelKind::Denoiser,
        unet: d.config().clone(),
        in_channels: d.state_channels() + d.cond_channels(),
        out_channels: d.state_channels(),
        height,
        width,
        frozen: false,
    };
    Checkpoint::from_store(config, d.max_t(), meta, &d.params)
}

/// Reads only the precision byte, so callers can pick `f32` or `f64`.
pub fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let buf = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    if buf.len() < 10 || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint", path.display())));
    }
    DType::from_code(buf[9]).ok_or_else(|| Error::Checkpoint(format!("{}: unknown dtype", path.display())))
}

/// 8-bit binary PGM of one `[1, H, W]` or `[H, W]` tensor in `[-1, 1]`
/// units, clamped; values above 1 or below -1 saturate.
pub fn pgm_bytes<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let s = t.shape();
    let (h, w) = match s {
        [h, w] | [1, h, w] => (*h, *w),
        _ => return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "PGM output needs [H, W] or [1, H, W]".into(),
        }),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|v| {
        let u = ((v.as_f64() + 1.0) * 0.5).clamp(0.0, 1.0);
        (u * 255.0).round() as u8
    }));
    Ok(out)
}

pub fn save_pgm<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, pgm_bytes(t)?)?;
    Ok(())
}
