//! Experiment plumbing: configuration, metrics, checkpoints and the
//! commands behind the `mvgrpo` binary.
//!
//! Output directory layout:
//!
//! ```text
//! <out>/pretrained.ckpt
//! <out>/metrics.jsonl
//! <out>/checkpoints/iter_00050.ckpt   + iter_00050.state.json
//! <out>/checkpoints/latest.ckpt       + latest.state.json
//! <out>/drift/<enhancer>_step<k>.tsv
//! ```
//!
//! Writers hold `<out>/.lock` for their lifetime.

pub mod config;
pub mod eval;
pub mod metrics;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

pub use config::ExperimentConfig;
pub use eval::{evaluate, EvalConfig, EvalReport};
pub use metrics::{plot_table, read_metrics, MetricsWriter, PLOT_HEADER};

use crate::enhancer::{Enhancer, EnhancerKind};
use crate::error::{Error, Result};
use crate::flowmodel::{checkpoint, pretrain as fm_pretrain, PolicyParams};
use crate::mvgrpo::{drift_report, DriftReport, IterationReport, TrainMode, Trainer, TrainerState};

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::io(
                        &path,
                        std::io::Error::new(e.kind(), "another process is using this output directory"),
                    )
                } else {
                    Error::io(&path, e)
                }
            })?;
        let _ = writeln!(file, "{}", std::process::id());
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone)]
pub struct PretrainSummary {
    pub path: PathBuf,
    pub digest: String,
    pub first_loss: f64,
    pub final_loss: f64,
}

pub fn run_pretrain(cfg: &ExperimentConfig) -> Result<PretrainSummary> {
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let out = fm_pretrain(&cfg.pretrain, &cfg.data, &cfg.model, cfg.seed)?;
    let path = cfg.output_dir.join("pretrained.ckpt");
    let digest = checkpoint::save(&out.params, &path)?;
    Ok(PretrainSummary {
        path,
        digest,
        first_loss: out.losses[0],
        final_loss: *out.losses.last().expect("at least one step"),
    })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Single-view baseline (no augmented conditions).
    pub baseline: bool,
    /// Continue from `<out>/checkpoints/latest.*`.
    pub resume: bool,
    /// Stop once this many iterations are complete, as if interrupted.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub iterations_done: usize,
    pub last: Option<IterationReport>,
    pub checkpoint: PathBuf,
    pub digest: String,
}

fn checkpoint_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("checkpoints")
}

fn save_train_checkpoint(dir: &Path, name: &str, params: &PolicyParams, state: &TrainerState) -> Result<(PathBuf, String)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ckpt = dir.join(format!("{name}.ckpt"));
    let digest = checkpoint::save(params, &ckpt)?;
    let state_path = dir.join(format!("{name}.state.json"));
    let json = serde_json::to_string(state).expect("state serializes");
    std::fs::write(&state_path, json).map_err(|e| Error::io(&state_path, e))?;
    Ok((ckpt, digest))
}

fn load_state(path: &Path) -> Result<TrainerState> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn run_train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let (base, _) = checkpoint::load(&cfg.pretrained_path())?;
    let mode = if opts.baseline {
        TrainMode::Baseline
    } else {
        TrainMode::MultiView
    };
    let ckpt_dir = checkpoint_dir(cfg);
    let mut trainer = if opts.resume {
        let (params, _) = checkpoint::load(&ckpt_dir.join("latest.ckpt"))?;
        let state = load_state(&ckpt_dir.join("latest.state.json"))?;
        Trainer::resume(cfg.train_config(), mode, base, params, &state)?
    } else {
        Trainer::new(cfg.train_config(), mode, base)?
    };
    trainer.record_wall_time(cfg.record_wall_time);
    let metrics_path = cfg.output_dir.join("metrics.jsonl");
    let mut metrics = MetricsWriter::open(&metrics_path, trainer.iteration())?;

    let total = cfg.grpo.iterations;
    let stop = opts.stop_after.unwrap_or(total).min(total);
    let mut last = None;
    while trainer.iteration() < stop {
        let report = trainer.step()?;
        metrics.append(&report)?;
        last = Some(report);
        let done = trainer.iteration();
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < stop {
            let state = trainer.state();
            save_train_checkpoint(&ckpt_dir, &format!("iter_{done:05}"), trainer.params(), &state)?;
            save_train_checkpoint(&ckpt_dir, "latest", trainer.params(), &state)?;
        }
    }
    let state = trainer.state();
    let done = trainer.iteration();
    save_train_checkpoint(&ckpt_dir, &format!("iter_{done:05}"), trainer.params(), &state)?;
    let (checkpoint, digest) = save_train_checkpoint(&ckpt_dir, "latest", trainer.params(), &state)?;
    Ok(TrainSummary {
        iterations_done: done,
        last,
        checkpoint,
        digest,
    })
}

/// Evaluates a checkpoint; `n_conditions` / `n_samples` override the config.
pub fn run_eval(
    cfg: &ExperimentConfig,
    checkpoint_path: &Path,
    n_conditions: Option<usize>,
    n_samples: Option<usize>,
) -> Result<EvalReport> {
    let mut eval_cfg = cfg.eval.clone();
    if let Some(n) = n_conditions {
        eval_cfg.n_conditions = n;
    }
    if let Some(n) = n_samples {
        eval_cfg.n_samples = n;
    }
    eval_cfg.validate()?;
    let (params, _) = checkpoint::load(checkpoint_path)?;
    let grid = cfg.sampling.grid()?;
    evaluate(&params, &cfg.data, &cfg.reward, &grid, &eval_cfg)
}

#[derive(Debug, Clone)]
pub struct DriftSummary {
    pub report: DriftReport,
    pub tables: Vec<PathBuf>,
}

pub fn run_drift(
    cfg: &ExperimentConfig,
    checkpoint_path: &Path,
    kind: Option<EnhancerKind>,
    n_pairs: Option<usize>,
) -> Result<DriftSummary> {
    let mut drift_cfg = cfg.drift.clone();
    if let Some(n) = n_pairs {
        drift_cfg.n_pairs = n;
    }
    drift_cfg.validate()?;
    let mut enhancer_cfg = cfg.enhancer.clone();
    if let Some(k) = kind {
        enhancer_cfg.kind = k;
    }
    enhancer_cfg.validate()?;
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let (params, _) = checkpoint::load(checkpoint_path)?;
    let grid = cfg.sampling.grid()?;
    let schedule = cfg.sampling.schedule(&grid)?;
    let mut enhancer = Enhancer::from_config(&enhancer_cfg, &cfg.data)?;
    let report = drift_report(&params, &drift_cfg, &mut enhancer, &cfg.data, &grid, &schedule, cfg.seed)?;
    let tables = report.write_tables(&cfg.output_dir.join("drift"), enhancer_cfg.kind.name())?;
    Ok(DriftSummary { report, tables })
}

pub fn run_plotdata(metrics_path: &Path) -> Result<String> {
    Ok(plot_table(&read_metrics(metrics_path)?))
}
