//! Run configuration. TOML with a strict schema: unknown keys are errors,
//! reported with line and column.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ShapeSceneSpec, SplitSizes, Task};
use crate::error::{Error, Result};
use crate::models::{TrainConfig, UNetConfig};
use crate::numeric::{AdamConfig, DType, RNG_ALGORITHM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub sizes: SplitSizes,
    /// Regenerate the synthetic set from `scene` instead of reading `path`.
    #[serde(default = "yes")]
    pub generate: bool,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub scene: ShapeSceneSpec,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub model: UNetConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Images sampled per reverse-chain batch.
    #[serde(default = "default_sample_batch")]
    pub sample_batch: usize,
}

fn default_sample_batch() -> usize {
    64
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sample_batch: default_sample_batch(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Task,
    pub seed: u64,
    pub precision: DType,
    /// Diffusion horizon `T`.
    pub timesteps: usize,
    #[serde(default = "default_rng")]
    pub rng: String,
    pub data: DataConfig,
    /// Required in segmentation mode, ignored in restoration mode.
    #[serde(default)]
    pub e2e: Option<ModelSection>,
    pub denoiser: ModelSection,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_rng() -> String {
    RNG_ALGORITHM.to_string()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.rng != RNG_ALGORITHM {
            return Err(Error::Config(format!(
                "rng {:?} is not supported (only {RNG_ALGORITHM:?})",
                self.rng
            )));
        }
        if self.timesteps < 2 {
            return Err(Error::Config("timesteps must be at least 2".into()));
        }
        if self.denoiser.model.time_embed_dim.is_none() {
            return Err(Error::Config("denoiser.model.time_embed_dim is required".into()));
        }
        self.denoiser.model.validate()?;
        self.denoiser.train.validate()?;
        if self.mode == Task::Segmentation {
            let e = self
                .e2e
                .as_ref()
                .ok_or_else(|| Error::Config("segmentation mode needs an [e2e] section".into()))?;
            e.model.validate()?;
            e.train.validate()?;
        }
        if !self.data.generate && self.data.path.is_none() {
            return Err(Error::Config(
                "data.generate = false requires data.path to point at a saved dataset".into(),
            ));
        }
        self.data.scene.validate()?;
        if self.eval.sample_batch == 0 {
            return Err(Error::Config("eval.sample_batch must be positive".into()));
        }
        Ok(())
    }

    /// Desk-scale segmentation run: 16x16 scenes, 2048/256/256 split, T = 1000.
    pub fn segmentation_default() -> Self {
        RunConfig {
            mode: Task::Segmentation,
            seed: 42,
            precision: DType::F32,
            timesteps: 1000,
            rng: default_rng(),
            data: DataConfig {
                sizes: SplitSizes {
                    train: 2048,
                    val: 256,
                    test: 256,
                },
                generate: true,
                path: None,
                // A clear intensity gap keeps the mask nearly determined by
                // the image, so test error is dominated by what each learner
                // fails to fit rather than by irreducible ambiguity.
                scene: ShapeSceneSpec {
                    fg_intensity: (0.6, 0.9),
                    bg_intensity: (0.1, 0.4),
                    noise_std: 0.1,
                    seed: 42,
                    ..ShapeSceneSpec::default()
                },
            },
            e2e: Some(ModelSection {
                model: UNetConfig {
                    base_channels: 4,
                    channel_mults: vec![1, 2],
                    groups: 2,
                    time_embed_dim: None,
                },
                train: TrainConfig {
                    steps: 300,
                    batch_size: 32,
                    adam: AdamConfig {
                        lr: 1e-3,
                        ..AdamConfig::default()
                    },
                    eval_every: 50,
                    patience: 4,
                },
            }),
            denoiser: ModelSection {
                model: UNetConfig {
                    base_channels: 16,
                    channel_mults: vec![1, 2, 2],
                    groups: 4,
                    time_embed_dim: Some(32),
                },
                train: TrainConfig {
                    steps: 2000,
                    batch_size: 32,
                    adam: AdamConfig {
                        lr: 1e-3,
                        ..AdamConfig::default()
                    },
                    eval_every: 200,
                    patience: 5,
                },
            },
            eval: EvalConfig::default(),
            out: None,
        }
    }

    /// Desk-scale restoration run: additive Gaussian corruption, no E2E learner.
    pub fn restoration_default() -> Self {
        let mut cfg = Self::segmentation_default();
        cfg.mode = Task::Restoration;
        cfg.e2e = None;
        cfg
    }
}
