use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use simpa::autodiff::InnerGradMode;
use simpa::cli_experiments::{checkpoint, emit_plot_data, eval, run_eval, run_train, ExperimentConfig, Mode, ModelState};

#[derive(Parser)]
#[command(name = "simpa", version, about = "Implicit PAC-Bayes few-shot meta-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Simpa,
    Maml,
}

#[derive(Clone, Copy, ValueEnum)]
enum InnerGradArg {
    First,
    Second,
}

#[derive(clap::Args)]
struct Common {
    /// Preset name (regression-appendix-d, classification-appendix-f) or JSON config path.
    #[arg(long)]
    config: String,
    /// Overrides the config seed. Falls back to SIMPA_SEED when absent.
    #[arg(long, env = "SIMPA_SEED")]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    inner_grad: Option<InnerGradArg>,
}

impl Common {
    fn resolve(&self) -> simpa::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.mode = match m {
                ModeArg::Simpa => Mode::Simpa,
                ModeArg::Maml => Mode::Maml,
            };
        }
        if let Some(g) = self.inner_grad {
            cfg.train.inner_grad = match g {
                InnerGradArg::First => InnerGradMode::FirstOrder,
                InnerGradArg::Second => InnerGradMode::SecondOrder,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train, resuming when the checkpoint already exists.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        /// Checkpoint path; defaults to <out>/checkpoint.bin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Print a progress line every this many iterations (0 disables).
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Evaluate a checkpoint on fresh episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n_tasks: usize,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Turn evaluation reports into plot CSVs.
    PlotData {
        /// eval_report.json files, one per model.
        #[arg(long = "report", required = true)]
        reports: Vec<PathBuf>,
        #[arg(long, default_value = "runs/plots")]
        out: PathBuf,
    },
    /// Print a checkpoint's header, blocks and iteration.
    InspectCheckpoint {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { common, out, checkpoint, log_every } => {
            let cfg = common.resolve()?;
            let outcome = run_train(&cfg, &out, checkpoint.as_deref(), |line| {
                if log_every > 0 && line.iteration % log_every == 0 {
                    match &line.bound {
                        Some(b) => eprintln!("iter {:>6}  bound {:.4}  nll {:.4}", line.iteration, b.bound, line.query_nll),
                        None => eprintln!("iter {:>6}  nll {:.4}", line.iteration, line.query_nll),
                    }
                }
            })?;
            println!("trained {} -> {} iterations", outcome.start_iteration, outcome.final_state.iteration());
            println!("checkpoint {}", outcome.checkpoint.display());
            println!("metrics {}", outcome.metrics.display());
        }
        Command::Eval { common, checkpoint: path, n_tasks, out } => {
            let cfg = common.resolve()?;
            let ck = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
            if ck.state.mode() != cfg.mode {
                bail!("checkpoint holds a {} model but the config selects {}", ck.state.mode(), cfg.mode);
            }
            let report = run_eval(&cfg, &ck.state, n_tasks)?;
            eval::write_report(&report, &out)?;
            println!("{}", serde_json::to_string(&summary(&report))?);
        }
        Command::PlotData { reports, out } => {
            let reports = reports.iter().map(|p| eval::read_report(p).with_context(|| format!("reading {}", p.display()))).collect::<anyhow::Result<Vec<_>>>()?;
            for p in emit_plot_data(&reports, &out)? {
                println!("{}", p.display());
            }
        }
        Command::InspectCheckpoint { checkpoint: path } => {
            let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            let (config, mode, blocks) = checkpoint::decode_blocks(&bytes)?;
            println!("version {}", checkpoint::VERSION);
            println!("mode {mode}");
            println!("config {}", config.name);
            for b in &blocks {
                println!("block {:<24} shape {:?}", b.name, b.shape);
            }
            let ck = checkpoint::decode(&bytes)?;
            println!("iteration {}", ck.state.iteration());
            if let ModelState::Simpa(s) = &ck.state {
                println!("sigma_theta {}", s.hyper.sigma_theta);
            }
        }
    }
    Ok(())
}

fn summary(r: &eval::EvalReport) -> serde_json::Value {
    serde_json::json!({
        "mode": r.mode,
        "n_tasks": r.n_tasks,
        "mean_nll": r.mean_nll,
        "mean_mse": r.mean_mse,
        "accuracy": r.accuracy,
        "ece": r.ece,
        "mce": r.mce,
        "bound": r.bound,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.chain().any(|c| matches!(c.downcast_ref::<simpa::Error>(), Some(simpa::Error::Config { .. } | simpa::Error::Json(_))));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
