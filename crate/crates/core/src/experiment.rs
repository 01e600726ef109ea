//! End-to-end runs: data, frozen end-to-end learner, diffusion learner,
//! test-split evaluation. Shared by the command-line tool and the
//! acceptance suite.

use crate::config::RunConfig;
use crate::data::{stack, Dataset, Item, Split, Task};
use crate::error::{Error, Result};
use crate::metrics::{per_image, MetricReport, MetricRow};
use crate::models::{train_e2e, Denoiser, E2EModel, TrainReport};
use crate::numeric::{Real, Rng, Tensor};
use crate::pipeline::{infer, residual, residual_target, train_diffusion, DiffusionReport, EnsembleOutput};
use crate::schedule::Schedule;

/// Labels for the independent generator streams of one run.
pub mod streams {
    pub const E2E_INIT: u64 = 1;
    pub const E2E_TRAIN: u64 = 2;
    pub const DENOISER_INIT: u64 = 3;
    pub const DIFFUSION_TRAIN: u64 = 4;
    pub const SAMPLING: u64 = 5;
}

pub fn run_rng(cfg: &RunConfig, label: u64) -> Rng {
    Rng::new(cfg.seed).fork(label)
}

pub fn build_dataset<T: Real>(cfg: &RunConfig) -> Result<Dataset<T>> {
    if cfg.data.generate {
        let d = Dataset::generate(&cfg.data.scene, cfg.mode, cfg.data.sizes)?;
        d.check_disjoint()?;
        Ok(d)
    } else {
        let path = cfg.data.path.as_ref().expect("validated");
        let d = crate::io::load_dataset(path)?;
        if d.task != cfg.mode {
            return Err(Error::Dataset(format!(
                "dataset at {} is a {:?} set but the run is {:?}",
                path.display(),
                d.task,
                cfg.mode
            )));
        }
        Ok(d)
    }
}

fn image_dims(data: &Dataset<impl Real>) -> Result<(usize, usize)> {
    let first = data
        .items
        .first()
        .ok_or_else(|| Error::Dataset("empty dataset".into()))?;
    let s = first.image.shape();
    Ok((s[1], s[2]))
}

/// Trains and freezes the end-to-end learner.
pub fn train_e2e_stage<T: Real>(cfg: &RunConfig, data: &Dataset<T>) -> Result<(E2EModel<T>, TrainReport)> {
    let section = cfg
        .e2e
        .as_ref()
        .ok_or_else(|| Error::Config("no [e2e] section".into()))?;
    let (h, w) = image_dims(data)?;
    let mut init = run_rng(cfg, streams::E2E_INIT);
    let mut model = E2EModel::new(&section.model, 1, 1, h, w, &mut init)?;
    let mut rng = run_rng(cfg, streams::E2E_TRAIN);
    let report = train_e2e(&mut model, data, &section.train, &mut rng)?;
    Ok((model.freeze(), report))
}

pub fn new_denoiser<T: Real>(cfg: &RunConfig) -> Result<Denoiser<T>> {
    let mut init = run_rng(cfg, streams::DENOISER_INIT);
    Denoiser::new(&cfg.denoiser.model, 1, 1, cfg.timesteps, &mut init)
}

pub fn train_diffusion_stage<T: Real>(
    cfg: &RunConfig,
    e2e: Option<&E2EModel<T>>,
    data: &Dataset<T>,
) -> Result<(Denoiser<T>, DiffusionReport)> {
    let s = Schedule::new(cfg.timesteps)?;
    let mut d = new_denoiser(cfg)?;
    let mut rng = run_rng(cfg, streams::DIFFUSION_TRAIN);
    let e2e = if cfg.mode == Task::Segmentation { e2e } else { None };
    let report = train_diffusion(&mut d, e2e, data, &s, &cfg.denoiser.train, &mut rng)?;
    Ok((d, report))
}

/// Per-image metrics of one method on one item.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub index: u64,
    pub method: String,
    pub report: MetricReport,
}

pub struct Evaluation<T> {
    pub split: Split,
    /// Reference learner (`e2e`, or `input` for restoration), `diffusion`
    /// (scored against its own residual target) and `ensemble`.
    pub rows: Vec<MetricRow>,
    pub per_image: Vec<ImageMetrics>,
    pub outputs: EnsembleOutput<T>,
    pub targets: Tensor<T>,
    pub images: Tensor<T>,
}

impl<T> Evaluation<T> {
    pub fn row(&self, method: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

pub fn reference_name(task: Task) -> &'static str {
    match task {
        Task::Segmentation => "e2e",
        Task::Restoration => "input",
    }
}

/// Samples the ensemble for every item of `split` and scores it.
pub fn evaluate<T: Real>(
    cfg: &RunConfig,
    d: &Denoiser<T>,
    e2e: Option<&E2EModel<T>>,
    data: &Dataset<T>,
    split: Split,
) -> Result<Evaluation<T>> {
    let s = Schedule::new(cfg.timesteps)?;
    let items: Vec<&Item<T>> = data.split(split);
    if items.is_empty() {
        return Err(Error::Dataset(format!("{} split is empty", split.name())));
    }
    let mut rng = run_rng(cfg, streams::SAMPLING);
    let all: Vec<usize> = (0..items.len()).collect();
    let mut parts: Vec<EnsembleOutput<T>> = Vec::new();
    for chunk in all.chunks(cfg.eval.sample_batch) {
        let (images, _) = stack(&items, chunk)?;
        parts.push(infer(d, e2e, cfg.mode, &images, &s, &mut rng)?);
    }
    let cat = |f: fn(&EnsembleOutput<T>) -> &Tensor<T>| -> Result<Tensor<T>> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(f).collect();
        Tensor::concat_batch(&refs)
    };
    let outputs = EnsembleOutput {
        x_hat: cat(|o| &o.x_hat)?,
        x_bar: cat(|o| &o.x_bar)?,
        combined: cat(|o| &o.combined)?,
    };
    let (images, targets) = stack(&items, &all)?;
    let x_bar_target = residual_target(&targets, &residual(&outputs.x_hat, &targets)?)?;

    let scored = [
        (reference_name(cfg.mode), per_image(&outputs.x_hat, &targets)?),
        ("diffusion", per_image(&outputs.x_bar, &x_bar_target)?),
        ("ensemble", per_image(&outputs.combined, &targets)?),
    ];
    let mut rows = Vec::new();
    let mut per = Vec::new();
    for (method, reports) in &scored {
        rows.push(MetricRow {
            method: method.to_string(),
            split: split.name().to_string(),
            report: MetricReport::mean(reports),
            n_images: reports.len(),
        });
        for (item, r) in items.iter().zip(reports) {
            per.push(ImageMetrics {
                index: item.index,
                method: method.to_string(),
                report: *r,
            });
        }
    }
    Ok(Evaluation {
        split,
        rows,
        per_image: per,
        outputs,
        targets,
        images,
    })
}

pub struct RunResult<T> {
    pub e2e: Option<E2EModel<T>>,
    pub e2e_report: Option<TrainReport>,
    pub denoiser: Denoiser<T>,
    pub diffusion_report: DiffusionReport,
    pub eval: Evaluation<T>,
}

/// The whole experiment in memory.
pub fn run<T: Real>(cfg: &RunConfig) -> Result<RunResult<T>> {
    cfg.validate()?;
    if cfg.precision != T::DTYPE {
        return Err(Error::Config(format!(
            "config asks for {} but the run was started at {}",
            cfg.precision.name(),
            T::DTYPE.name()
        )));
    }
    let data = build_dataset::<T>(cfg)?;
    let (e2e, e2e_report) = match cfg.mode {
        Task::Segmentation => {
            let (m, r) = train_e2e_stage(cfg, &data)?;
            (Some(m), Some(r))
        }
        Task::Restoration => (None, None),
    };
    let (denoiser, diffusion_report) = train_diffusion_stage(cfg, e2e.as_ref(), &data)?;
    let eval = evaluate(cfg, &denoiser, e2e.as_ref(), &data, Split::Test)?;
    Ok(RunResult {
        e2e,
        e2e_report,
        denoiser,
        diffusion_report,
        eval,
    })
}
