//! `rsddpm`: train, sample, score and verify residual-ensemble diffusion models.
//!
//! Exit codes: 0 on success, 1 when a verification check or metric fails,
//! 2 on usage, configuration or input errors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use resddpm::config::RunConfig;
use resddpm::data::{Dataset, Split, Task};
use resddpm::experiment::{self, Evaluation};
use resddpm::io::{self, Checkpoint, ModelKind};
use resddpm::metrics::{self, CSV_HEADER};
use resddpm::models::{Denoiser, E2EModel, LogRecord};
use resddpm::numeric::{DType, Real, Tensor};
use resddpm::verify::{self, VerifyOptions};

#[derive(Parser, Debug)]
#[command(name = "rsddpm", version, about = "Residual-ensemble denoising diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML). Defaults to the built-in desk configuration for the mode.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/latest")]
    out: PathBuf,
    #[arg(long, global = true, value_parser = ["segmentation", "restoration"])]
    mode: Option<String>,
    /// Checkpoint to load (repeatable: one end-to-end and one denoiser).
    #[arg(long = "ckpt", global = true)]
    ckpts: Vec<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and freeze the end-to-end learner.
    TrainE2e,
    /// Train the noise predictor on the residual target.
    TrainDiffusion,
    /// Sample ensemble outputs for a split and write them as tensors and PGM images.
    Infer {
        #[arg(long, default_value = "test")]
        split: String,
        /// Write at most this many images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score the reference learner, the diffusion learner and the ensemble on a split.
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the analytic property suite.
    Verify {
        /// Fault injection (debug builds only), e.g. `alpha-for-alpha-bar`.
        #[arg(long, hide = true)]
        inject_mutation: Option<String>,
    },
    /// Generate the configured dataset and save it under `--out`.
    GenData,
}

/// Errors that map to exit code 1.
#[derive(Debug)]
struct CheckFailure(String);

impl std::fmt::Display for CheckFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailure {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<CheckFailure>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("RSDDPM_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| anyhow!("RSDDPM_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            bail!("RSDDPM_THREADS must be a positive integer, got 0");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mode = match cli.mode.as_deref() {
        Some("segmentation") => Some(Task::Segmentation),
        Some("restoration") => Some(Task::Restoration),
        _ => None,
    };
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => match mode.unwrap_or(Task::Segmentation) {
            Task::Segmentation => RunConfig::segmentation_default(),
            Task::Restoration => RunConfig::restoration_default(),
        },
    };
    if let Some(m) = mode {
        cfg.mode = m;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Command::Verify { inject_mutation } = &cli.command {
        return cmd_verify(cli.seed.unwrap_or(0), inject_mutation.as_deref());
    }
    let cfg = resolve_config(&cli)?;
    match cfg.precision {
        DType::F32 => dispatch::<f32>(&cli, &cfg),
        DType::F64 => dispatch::<f64>(&cli, &cfg),
    }
}

fn dispatch<T: Real>(cli: &Cli, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    fs::write(cli.out.join("config.toml"), cfg.to_toml())?;
    match &cli.command {
        Command::TrainE2e => cmd_train_e2e::<T>(cli, cfg),
        Command::TrainDiffusion => cmd_train_diffusion::<T>(cli, cfg),
        Command::Infer { split, limit } => cmd_infer::<T>(cli, cfg, split.parse()?, *limit),
        Command::Eval { split } => cmd_eval::<T>(cli, cfg, split.parse()?),
        Command::GenData => {
            let data = experiment::build_dataset::<T>(cfg)?;
            io::save_dataset(&cli.out, &data, &cfg.data.scene)?;
            println!("seed {} wrote {} items to {}", cfg.seed, data.items.len(), cli.out.display());
            Ok(())
        }
        Command::Verify { .. } => unreachable!("handled before config resolution"),
    }
}

fn write_log(path: &Path, seed: u64, log: &[LogRecord]) -> anyhow::Result<()> {
    let mut f = fs::File::create(path)?;
    for r in log {
        let mut v = serde_json::to_value(r)?;
        v["seed"] = seed.into();
        writeln!(f, "{v}")?;
    }
    Ok(())
}

fn cmd_train_e2e<T: Real>(cli: &Cli, cfg: &RunConfig) -> anyhow::Result<()> {
    if cfg.mode == Task::Restoration {
        bail!("restoration mode uses the corrupted input as x_hat; no end-to-end model is trained");
    }
    let data = experiment::build_dataset::<T>(cfg)?;
    let (model, report) = experiment::train_e2e_stage(cfg, &data)?;
    let ck = io::e2e_checkpoint(cfg.to_toml(), cfg.timesteps, &model);
    let path = cli.out.join("e2e.ckpt");
    ck.save(&path)?;
    write_log(&cli.out.join("e2e_train.jsonl"), cfg.seed, &report.log)?;
    println!(
        "seed {} e2e steps {} best_val_loss {:?} checkpoint {} sha256 {}",
        cfg.seed,
        report.steps_run,
        report.best_val_loss,
        path.display(),
        hex::encode(ck.digest())
    );
    Ok(())
}

struct Loaded<T> {
    e2e: Option<E2EModel<T>>,
    denoiser: Option<Denoiser<T>>,
}

fn load_ckpts<T: Real>(cli: &Cli) -> anyhow::Result<Loaded<T>> {
    let mut out = Loaded {
        e2e: None,
        denoiser: None,
    };
    for p in &cli.ckpts {
        let dtype = io::checkpoint_dtype(p)?;
        if dtype != T::DTYPE {
            bail!(
                "precision mismatch: {} holds {} weights but the run is configured for {}",
                p.display(),
                dtype.name(),
                T::DTYPE.name()
            );
        }
        let ck = Checkpoint::<T>::load(p)?;
        match ck.meta.kind {
            ModelKind::E2e => {
                if out.e2e.is_some() {
                    bail!("more than one end-to-end checkpoint given");
                }
                let m = ck.into_e2e()?;
                if !m.is_frozen() {
                    bail!("{} holds an unfrozen end-to-end model", p.display());
                }
                out.e2e = Some(m);
            }
            ModelKind::Denoiser => {
                if out.denoiser.is_some() {
                    bail!("more than one denoiser checkpoint given");
                }
                out.denoiser = Some(ck.into_denoiser()?);
            }
        }
    }
    Ok(out)
}

fn require_e2e<T: Real>(cfg: &RunConfig, loaded: &Loaded<T>) -> anyhow::Result<()> {
    if cfg.mode == Task::Segmentation && loaded.e2e.is_none() {
        bail!(
            "segmentation mode needs the frozen pretrained end-to-end model: the diffusion learner is \
             trained on x_bar = 2 x0 - E2E(I0); pass it with --ckpt"
        );
    }
    Ok(())
}

fn cmd_train_diffusion<T: Real>(cli: &Cli, cfg: &RunConfig) -> anyhow::Result<()> {
    let loaded = load_ckpts::<T>(cli)?;
    require_e2e(cfg, &loaded)?;
    let data = experiment::build_dataset::<T>(cfg)?;
    let (d, report) = experiment::train_diffusion_stage(cfg, loaded.e2e.as_ref(), &data)?;
    let (h, w) = {
        let s = data.items[0].image.shape();
        (s[1], s[2])
    };
    let ck = io::denoiser_checkpoint(cfg.to_toml(), h, w, &d);
    let path = cli.out.join("denoiser.ckpt");
    ck.save(&path)?;
    write_log(&cli.out.join("diffusion_train.jsonl"), cfg.seed, &report.train.log)?;
    println!(
        "seed {} diffusion steps {} best_val_loss {:?} cache_hits {} cache_misses {} checkpoint {} sha256 {}",
        cfg.seed,
        report.train.steps_run,
        report.train.best_val_loss,
        report.cache_hits,
        report.cache_misses,
        path.display(),
        hex::encode(ck.digest())
    );
    Ok(())
}

fn evaluation<T: Real>(cli: &Cli, cfg: &RunConfig, split: Split) -> anyhow::Result<Evaluation<T>> {
    let loaded = load_ckpts::<T>(cli)?;
    require_e2e(cfg, &loaded)?;
    let d = loaded
        .denoiser
        .ok_or_else(|| anyhow!("no denoiser checkpoint given (--ckpt)"))?;
    if d.max_t() != cfg.timesteps {
        bail!(
            "denoiser checkpoint was trained with T = {} but the config says T = {}",
            d.max_t(),
            cfg.timesteps
        );
    }
    let data: Dataset<T> = experiment::build_dataset(cfg)?;
    let e2e = if cfg.mode == Task::Segmentation { loaded.e2e.as_ref() } else { None };
    Ok(experiment::evaluate(cfg, &d, e2e, &data, split)?)
}

fn cmd_infer<T: Real>(cli: &Cli, cfg: &RunConfig, split: Split, limit: Option<usize>) -> anyhow::Result<()> {
    let ev = evaluation::<T>(cli, cfg, split)?;
    let dir = cli.out.join("images");
    fs::create_dir_all(&dir)?;
    let n = ev.images.batch().min(limit.unwrap_or(usize::MAX));
    let one = |t: &Tensor<T>, i: usize| -> anyhow::Result<Tensor<T>> {
        let s = t.slice_batch(i, 1)?;
        let shape = s.shape()[1..].to_vec();
        Ok(s.reshape(&shape)?)
    };
    let mut manifest = Vec::with_capacity(n);
    let items: Vec<u64> = {
        let mut seen: Vec<u64> = Vec::new();
        for r in &ev.per_image {
            if !seen.contains(&r.index) {
                seen.push(r.index);
            }
        }
        seen
    };
    for i in 0..n {
        let idx = items[i];
        let combined = one(&ev.outputs.combined, i)?;
        let mask = combined.map(|v| if v > T::zero() { T::one() } else { -T::one() });
        let parts = [
            ("input", one(&ev.images, i)?),
            ("x_hat", one(&ev.outputs.x_hat, i)?),
            ("x_bar", one(&ev.outputs.x_bar, i)?),
            ("combined", combined),
            ("mask", mask),
        ];
        for (name, t) in &parts {
            io::save_tensor(&dir.join(format!("{idx:05}_{name}.rst")), t)?;
            io::save_pgm(&dir.join(format!("{idx:05}_{name}.pgm")), t)?;
        }
        manifest.push(idx);
    }
    let meta = serde_json::json!({
        "seed": cfg.seed,
        "split": split.name(),
        "mode": cfg.mode,
        "timesteps": cfg.timesteps,
        "items": manifest,
    });
    fs::write(cli.out.join("infer.json"), serde_json::to_string_pretty(&meta)?)?;
    println!("seed {} wrote {} outputs to {}", cfg.seed, n, dir.display());
    Ok(())
}

fn cmd_eval<T: Real>(cli: &Cli, cfg: &RunConfig, split: Split) -> anyhow::Result<()> {
    let ev = evaluation::<T>(cli, cfg, split)?;
    let csv = metrics::to_csv(&ev.rows);
    fs::write(cli.out.join("metrics.csv"), &csv)?;
    let mut per = String::from("index,");
    per.push_str(CSV_HEADER);
    per.push('\n');
    for r in &ev.per_image {
        let row = metrics::MetricRow {
            method: r.method.clone(),
            split: split.name().into(),
            report: r.report,
            n_images: 1,
        };
        let line = metrics::to_csv(std::slice::from_ref(&row));
        per.push_str(&format!("{},{}", r.index, line.lines().nth(1).unwrap_or_default()));
        per.push('\n');
    }
    fs::write(cli.out.join("metrics_per_image.csv"), per)?;
    let meta = serde_json::json!({ "seed": cfg.seed, "split": split.name(), "rows": ev.rows });
    fs::write(cli.out.join("eval.json"), serde_json::to_string_pretty(&meta)?)?;
    print!("{csv}");
    println!("seed {}", cfg.seed);
    let finite = ev
        .rows
        .iter()
        .all(|r| r.report.iou.is_finite() && r.report.dice.is_finite() && r.report.mse.is_finite());
    if !finite {
        return Err(CheckFailure("non-finite metric in the evaluation report".into()).into());
    }
    Ok(())
}

fn cmd_verify(seed: u64, mutation: Option<&str>) -> anyhow::Result<()> {
    let mutation = match mutation {
        Some(m) if cfg!(debug_assertions) => Some(m.parse()?),
        Some(_) => bail!("fault injection is only available in debug builds"),
        None => None,
    };
    let checks = verify::run_all(&VerifyOptions { seed, mutation });
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("seed {seed}: {} checks, {failed} failed", checks.len());
    if failed > 0 {
        return Err(CheckFailure(format!("{failed} verification checks failed")).into());
    }
    Ok(())
}
