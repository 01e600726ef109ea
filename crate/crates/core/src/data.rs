//! Deterministic synthetic scenes for segmentation and restoration.
//!
//! Every item is a pure function of `(spec, index)`: item `i` draws from
//! ChaCha stream `i` of the scene seed, so regenerating any subset, in any
//! order or process, reproduces it bit for bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Real, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Segmentation,
    Restoration,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeSceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub kinds: Vec<ShapeKind>,
    /// Shape intensity range in `[0, 1]` image units.
    pub fg_intensity: (f64, f64),
    pub bg_intensity: (f64, f64),
    /// Std of additive pixel noise in segmentation scenes.
    pub noise_std: f64,
    /// Std of the additive corruption in restoration scenes (encoded units).
    pub corruption_std: f64,
    pub min_fg_fraction: f64,
    pub max_fg_fraction: f64,
    /// Smallest shape extent in pixels.
    pub min_shape_size: usize,
    pub seed: u64,
}

impl Default for ShapeSceneSpec {
    fn default() -> Self {
        ShapeSceneSpec {
            height: 16,
            width: 16,
            min_shapes: 1,
            max_shapes: 3,
            kinds: vec![ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Triangle],
            fg_intensity: (0.45, 0.9),
            bg_intensity: (0.1, 0.5),
            noise_std: 0.2,
            corruption_std: 0.3,
            min_fg_fraction: 0.05,
            max_fg_fraction: 0.6,
            min_shape_size: 3,
            seed: 0,
        }
    }
}

const MAX_ATTEMPTS: usize = 1000;

impl ShapeSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < self.min_shape_size.max(2) || self.width < self.min_shape_size.max(2) {
            return Err(Error::Dataset(format!(
                "image {}x{} is smaller than the minimum shape size {}",
                self.height, self.width, self.min_shape_size
            )));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes || self.kinds.is_empty() {
            return Err(Error::Dataset("need 1 <= min_shapes <= max_shapes and at least one kind".into()));
        }
        if !(0.0..1.0).contains(&self.min_fg_fraction) || self.min_fg_fraction >= self.max_fg_fraction {
            return Err(Error::Dataset("foreground fraction bounds must satisfy 0 <= min < max".into()));
        }
        if self.noise_std < 0.0 || self.corruption_std < 0.0 {
            return Err(Error::Dataset("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

/// A raw scene in `[0, 1]` image units with a `{0, 1}` mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// Noise-free rendering.
    pub clean: Vec<f64>,
    /// Rendering plus pixel noise.
    pub noisy: Vec<f64>,
    pub mask: Vec<f64>,
}

impl Scene {
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().sum::<f64>() / self.mask.len() as f64
    }
}

fn inside(kind: ShapeKind, geom: &[f64; 6], x: f64, y: f64) -> bool {
    match kind {
        ShapeKind::Disk => (x - geom[0]).powi(2) + (y - geom[1]).powi(2) <= geom[2] * geom[2],
        ShapeKind::Rectangle => (x - geom[0]).abs() <= geom[2] && (y - geom[1]).abs() <= geom[3],
        ShapeKind::Triangle => {
            let [ax, ay, bx, by, cx, cy] = *geom;
            let d1 = (x - bx) * (ay - by) - (ax - bx) * (y - by);
            let d2 = (x - cx) * (by - cy) - (bx - cx) * (y - cy);
            let d3 = (x - ax) * (cy - ay) - (cx - ax) * (y - ay);
            let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
            let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
            !(neg && pos)
        }
    }
}

fn draw_shape(spec: &ShapeSceneSpec, rng: &mut Rng) -> (ShapeKind, [f64; 6]) {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let kind = spec.kinds[rng.int_in(0, spec.kinds.len() - 1)];
    let min = spec.min_shape_size as f64;
    let max = (h.min(w) / 2.0).max(min);
    let geom = match kind {
        ShapeKind::Disk => {
            let r = rng.uniform_in(min / 2.0, max / 2.0);
            [rng.uniform_in(0.0, w), rng.uniform_in(0.0, h), r, 0.0, 0.0, 0.0]
        }
        ShapeKind::Rectangle => [
            rng.uniform_in(0.0, w),
            rng.uniform_in(0.0, h),
            rng.uniform_in(min / 2.0, max / 2.0),
            rng.uniform_in(min / 2.0, max / 2.0),
            0.0,
            0.0,
        ],
        ShapeKind::Triangle => {
            let cx = rng.uniform_in(0.0, w);
            let cy = rng.uniform_in(0.0, h);
            let mut g = [0.0; 6];
            for v in 0..3 {
                let ang = rng.uniform_in(0.0, std::f64::consts::TAU);
                let rad = rng.uniform_in(min * 0.6, max * 0.8);
                g[2 * v] = cx + rad * ang.cos();
                g[2 * v + 1] = cy + rad * ang.sin();
            }
            g
        }
    };
    (kind, geom)
}

/// Render scene `index`. Rejection-samples until the foreground fraction
/// lies in the configured bounds.
pub fn render_scene(spec: &ShapeSceneSpec, index: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = Rng::with_stream(spec.seed, index);
    let (h, w) = (spec.height, spec.width);
    for _ in 0..MAX_ATTEMPTS {
        let bg = rng.uniform_in(spec.bg_intensity.0, spec.bg_intensity.1);
        let mut clean = vec![bg; h * w];
        let mut mask = vec![0.0; h * w];
        let count = rng.int_in(spec.min_shapes, spec.max_shapes);
        for _ in 0..count {
            let (kind, geom) = draw_shape(spec, &mut rng);
            let level = rng.uniform_in(spec.fg_intensity.0, spec.fg_intensity.1);
            for y in 0..h {
                for x in 0..w {
                    if inside(kind, &geom, x as f64 + 0.5, y as f64 + 0.5) {
                        clean[y * w + x] = level;
                        mask[y * w + x] = 1.0;
                    }
                }
            }
        }
        let frac = mask.iter().sum::<f64>() / (h * w) as f64;
        if frac < spec.min_fg_fraction || frac > spec.max_fg_fraction {
            continue;
        }
        let noisy = clean.iter().map(|&v| v + spec.noise_std * rng.normal()).collect();
        return Ok(Scene { clean, noisy, mask });
    }
    Err(Error::Dataset(format!(
        "scene {index}: no layout within foreground bounds after {MAX_ATTEMPTS} attempts"
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// One `(I0, x0)` pair in network units (`[-1, 1]` encoding), each `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Item<T> {
    pub index: u64,
    pub split: Split,
    pub image: Tensor<T>,
    pub target: Tensor<T>,
    /// Known additive corruption, restoration only: `image = target + corruption`.
    pub corruption: Option<Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub task: Task,
    pub items: Vec<Item<T>>,
}

/// Maps `[0, 1]` image units to `[-1, 1]`.
pub fn encode_unit(v: f64) -> f64 {
    2.0 * v - 1.0
}

fn make_item<T: Real>(spec: &ShapeSceneSpec, task: Task, index: u64, split: Split) -> Result<Item<T>> {
    let scene = render_scene(spec, index)?;
    let shape = [1, spec.height, spec.width];
    let enc = |v: &[f64]| Tensor::<T>::new(&shape, v.iter().map(|&x| T::from_f64(encode_unit(x))).collect());
    match task {
        Task::Segmentation => Ok(Item {
            index,
            split,
            image: enc(&scene.noisy)?,
            target: enc(&scene.mask)?,
            corruption: None,
        }),
        Task::Restoration => {
            let target = enc(&scene.clean)?;
            // Corruption comes from a stream disjoint from every scene stream.
            let mut rng = Rng::with_stream(spec.seed ^ 0x5eed_c0de, index);
            let c: Vec<T> = (0..target.len())
                .map(|_| T::from_f64(spec.corruption_std * rng.normal()))
                .collect();
            let corruption = Tensor::new(&shape, c)?;
            let image = target.add(&corruption)?;
            Ok(Item {
                index,
                split,
                image,
                target,
                corruption: Some(corruption),
            })
        }
    }
}

impl<T: Real> Dataset<T> {
    /// Items `0..train` are the train split, the next `val` the validation
    /// split and the next `test` the test split.
    pub fn generate(spec: &ShapeSceneSpec, task: Task, sizes: SplitSizes) -> Result<Self> {
        spec.validate()?;
        let total = sizes.train + sizes.val + sizes.test;
        if total == 0 {
            return Err(Error::Dataset("dataset must contain at least one item".into()));
        }
        let items = (0..total as u64)
            .into_par_iter()
            .map(|i| {
                let split = if (i as usize) < sizes.train {
                    Split::Train
                } else if (i as usize) < sizes.train + sizes.val {
                    Split::Val
                } else {
                    Split::Test
                };
                make_item(spec, task, i, split)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { task, items })
    }

    pub fn split(&self, split: Split) -> Vec<&Item<T>> {
        self.items.iter().filter(|it| it.split == split).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// No index appears under two split tags.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::HashMap::new();
        for it in &self.items {
            if let Some(prev) = seen.insert(it.index, it.split) {
                if prev != it.split {
                    return Err(Error::Dataset(format!("item {} appears in two splits", it.index)));
                }
            }
        }
        Ok(())
    }
}

/// `n` segmentation pairs, all tagged as training data.
pub fn gen_segmentation<T: Real>(spec: &ShapeSceneSpec, n: usize) -> Result<Dataset<T>> {
    if n == 0 {
        return Err(Error::Dataset("n must be at least 1".into()));
    }
    Dataset::generate(spec, Task::Segmentation, SplitSizes { train: n, val: 0, test: 0 })
}

/// `n` restoration pairs `I0 = x0 + c` with the corruption `c` stored.
pub fn gen_restoration<T: Real>(spec: &ShapeSceneSpec, n: usize) -> Result<Dataset<T>> {
    if n == 0 {
        return Err(Error::Dataset("n must be at least 1".into()));
    }
    Dataset::generate(spec, Task::Restoration, SplitSizes { train: n, val: 0, test: 0 })
}

/// Stack the images and targets of `items[idx]` into `[B, 1, H, W]` tensors.
pub fn stack<T: Real>(items: &[&Item<T>], idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = items
        .get(*idx.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?)
        .ok_or_else(|| Error::InvalidArgument("batch index out of range".into()))?;
    let per = first.image.shape().to_vec();
    let mut img = Vec::with_capacity(idx.len() * first.image.len());
    let mut tgt = Vec::with_capacity(idx.len() * first.target.len());
    for &i in idx {
        let it = items
            .get(i)
            .ok_or_else(|| Error::InvalidArgument("batch index out of range".into()))?;
        img.extend_from_slice(it.image.data());
        tgt.extend_from_slice(it.target.data());
    }
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(&per);
    Ok((Tensor::new(&shape, img)?, Tensor::new(&shape, tgt)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::direct_residual;

    fn spec() -> ShapeSceneSpec {
        ShapeSceneSpec {
            seed: 31,
            ..ShapeSceneSpec::default()
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a: Dataset<f32> = gen_segmentation(&spec(), 24).unwrap();
        let b: Dataset<f32> = gen_segmentation(&spec(), 24).unwrap();
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.image.to_le_bytes(), y.image.to_le_bytes());
            assert_eq!(x.target.to_le_bytes(), y.target.to_le_bytes());
        }
        // Item identity does not depend on what else was generated.
        assert_eq!(render_scene(&spec(), 17).unwrap(), render_scene(&spec(), 17).unwrap());
        let wider = Dataset::<f32>::generate(&spec(), Task::Segmentation, SplitSizes { train: 10, val: 10, test: 10 }).unwrap();
        assert_eq!(wider.items[17].image, a.items[17].image);
    }

    #[test]
    fn masks_are_binary_and_within_foreground_bounds() {
        let s = spec();
        for i in 0..200 {
            let scene = render_scene(&s, i).unwrap();
            assert!(scene.mask.iter().all(|&m| m == 0.0 || m == 1.0));
            let f = scene.foreground_fraction();
            assert!((s.min_fg_fraction..=s.max_fg_fraction).contains(&f), "scene {i}: {f}");
        }
    }

    #[test]
    fn rejects_tiny_images_and_empty_requests() {
        let tiny = ShapeSceneSpec {
            height: 2,
            width: 2,
            ..spec()
        };
        assert!(gen_segmentation::<f32>(&tiny, 1).is_err());
        assert!(gen_segmentation::<f32>(&spec(), 0).is_err());
        assert!(gen_restoration::<f32>(&spec(), 0).is_err());
    }

    #[test]
    fn restoration_corruption_is_the_direct_residual() {
        let d: Dataset<f64> = gen_restoration(&spec(), 16).unwrap();
        for it in &d.items {
            let c = it.corruption.as_ref().unwrap();
            let r = direct_residual(&it.image, &it.target).unwrap();
            // image was built as target + c, so the subtraction is exact up to
            // one rounding of the sum.
            assert!(r.max_abs_diff(c).unwrap() < 1e-15);
        }
    }

    #[test]
    fn corruption_energy_matches_configured_level() {
        let s = spec();
        let d: Dataset<f64> = gen_restoration(&s, 256).unwrap();
        let mut energy = 0.0;
        let mut count = 0.0;
        for it in &d.items {
            for c in it.corruption.as_ref().unwrap().data() {
                energy += c * c;
                count += 1.0;
            }
        }
        let rms = (energy / count).sqrt();
        assert!((rms / s.corruption_std - 1.0).abs() < 0.05, "rms {rms}");
    }

    #[test]
    fn clean_limit_has_no_corruption() {
        let s = ShapeSceneSpec {
            corruption_std: 0.0,
            ..spec()
        };
        let d: Dataset<f32> = gen_restoration(&s, 4).unwrap();
        for it in &d.items {
            assert_eq!(it.image, it.target);
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let d = Dataset::<f32>::generate(&spec(), Task::Segmentation, SplitSizes { train: 8, val: 3, test: 5 }).unwrap();
        assert_eq!(d.split(Split::Train).len(), 8);
        assert_eq!(d.split(Split::Val).len(), 3);
        assert_eq!(d.split(Split::Test).len(), 5);
        d.check_disjoint().unwrap();
        let mut bad = d.clone();
        let mut dup = bad.items[0].clone();
        dup.split = Split::Test;
        bad.items.push(dup);
        assert!(bad.check_disjoint().is_err());
    }
}
