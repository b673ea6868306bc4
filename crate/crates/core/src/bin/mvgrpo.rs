use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mvgrpo::enhancer::EnhancerKind;
use mvgrpo::harness::{self, ExperimentConfig, TrainOptions};
use mvgrpo::{Error, Result};

#[derive(Parser)]
#[command(name = "mvgrpo", version, about = "Multi-view GRPO for a toy conditional flow model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EnhancerArg {
    Posterior,
    Prior,
    Identity,
    Random,
    Remote,
}

impl From<EnhancerArg> for EnhancerKind {
    fn from(a: EnhancerArg) -> Self {
        match a {
            EnhancerArg::Posterior => EnhancerKind::Posterior,
            EnhancerArg::Prior => EnhancerKind::Prior,
            EnhancerArg::Identity => EnhancerKind::Identity,
            EnhancerArg::Random => EnhancerKind::Random,
            EnhancerArg::Remote => EnhancerKind::Remote,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Flow-matching pretraining of the base policy.
    Pretrain(Common),
    /// Policy optimization starting from the pretrained checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Single-view baseline (no augmented conditions).
        #[arg(long)]
        baseline: bool,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed iterations.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Held-out evaluation of a checkpoint with ODE samples.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Parameter checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides eval.n_conditions.
        #[arg(long)]
        n_conditions: Option<usize>,
        /// Overrides eval.n_samples.
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Per-step probability drift histograms.
    Drift {
        #[command(flatten)]
        common: Common,
        /// Policy checkpoint that generates the trajectories.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides enhancer.kind.
        #[arg(long, value_enum)]
        enhancer: Option<EnhancerArg>,
        /// Overrides drift.n_pairs.
        #[arg(long)]
        n_pairs: Option<usize>,
    },
    /// Reward-curve table from a metrics file.
    Plotdata {
        /// metrics.jsonl written by `train`.
        #[arg(long)]
        metrics: PathBuf,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(common) => {
            let cfg = common.load()?;
            let s = harness::run_pretrain(&cfg)?;
            println!("checkpoint {}", s.path.display());
            println!("digest {}", s.digest);
            println!("loss {:.4} -> {:.4}", s.first_loss, s.final_loss);
        }
        Command::Train {
            common,
            baseline,
            resume,
            stop_after,
        } => {
            let cfg = common.load()?;
            let opts = TrainOptions {
                baseline,
                resume,
                stop_after,
            };
            let s = harness::run_train(&cfg, &opts)?;
            println!("iterations {}", s.iterations_done);
            if let Some(r) = &s.last {
                println!("anchor_mean_reward {:.4}", r.anchor_mean_reward);
            }
            println!("checkpoint {}", s.checkpoint.display());
            println!("digest {}", s.digest);
        }
        Command::Eval {
            common,
            checkpoint,
            n_conditions,
            n_samples,
        } => {
            let cfg = common.load()?;
            let report = harness::run_eval(&cfg, &checkpoint, n_conditions, n_samples)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Drift {
            common,
            checkpoint,
            enhancer,
            n_pairs,
        } => {
            let cfg = common.load()?;
            let s = harness::run_drift(&cfg, &checkpoint, enhancer.map(Into::into), n_pairs)?;
            for (step, path) in s.report.steps.iter().zip(&s.tables) {
                println!(
                    "step {}\tmedian {:.6}\tp90 {:.6}\t{}",
                    step.step,
                    step.median,
                    step.p90,
                    path.display()
                );
            }
        }
        Command::Plotdata { metrics, out } => {
            let table = harness::run_plotdata(&metrics)?;
            match out {
                Some(path) => std::fs::write(&path, table).map_err(|e| Error::io(&path, e))?,
                None => print!("{table}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
