use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use deltalab::config::{parse_overrides, ExperimentConfig};
use deltalab::runs;

/// Streaming-distillation laboratory.
#[derive(Parser)]
#[command(name = "deltalab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. `--train.steps 500 --seed=3`.
    #[arg(last = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::resolve(self.config.as_deref(), &parse_overrides(&self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one student and write its run directory.
    Train {
        /// Run directory; defaults to `<output root>/train-<hash>-seed<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a trained run.
    Eval {
        run: PathBuf,
        #[arg(long)]
        rollouts: Option<usize>,
        /// Comma-separated evaluation seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Train and evaluate several arms over several seeds.
    Compare {
        /// Arms to run; defaults to all of them.
        #[arg(long, value_delimiter = ',')]
        arms: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        workers: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Project a trajectory CSV and label its failure mode.
    Diagnose {
        trajectory: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the warm-up phase only and report the calibrated gate.
    CalibrateGate {
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { out, cfg } => {
            let cfg = cfg.resolve()?;
            let dir = out.unwrap_or_else(|| cfg.output_root().join(runs::default_run_name(&cfg)));
            let s = runs::run_train(&cfg, &dir)?;
            println!("trained {} steps into {}", s.log.len(), s.dir.display());
            if let Some(g) = s.gate.params {
                println!("gate mu={:.6} sharpness={:.6}", g.mu, g.sharpness);
            }
        }
        Command::Eval { run, rollouts, seeds } => {
            let cfg = ExperimentConfig::load(&run.join(runs::CONFIG_FILE))
                .with_context(|| format!("{} is not a run directory", run.display()))?;
            let seeds = if seeds.is_empty() { cfg.eval.seeds.clone() } else { seeds };
            let s = runs::run_eval(&run, rollouts.unwrap_or(cfg.eval.rollouts), &seeds)?;
            println!("chunk accuracy {:.4}", s.chunk_accuracy);
            print!("{}", runs::aggregate_csv(&s.table));
        }
        Command::Compare { arms, seeds, out, workers, cfg } => {
            let base = cfg.resolve()?;
            let arms = if arms.is_empty() {
                runs::default_arms(&base)
            } else {
                arms.iter()
                    .map(|n| runs::arm(&base, n).with_context(|| format!("unknown arm {n:?}; known: {:?}", runs::ARM_NAMES)))
                    .collect::<Result<Vec<_>>>()?
            };
            let out = out.unwrap_or_else(|| base.output_root().join(format!("compare-{}", &base.hash()[..12])));
            let workers = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let report = runs::run_compare(&arms, &seeds, &out, workers)?;
            for a in &report.arms {
                println!(
                    "{:<14} accuracy median {} iqr {} failures {}",
                    a.arm,
                    a.median_accuracy.map_or("-".into(), |v| format!("{v:.4}")),
                    a.iqr_accuracy.map_or("-".into(), |v| format!("{v:.4}")),
                    a.failures
                );
            }
            println!("report: {}", out.join(runs::COMPARE_REPORT_FILE).display());
        }
        Command::Diagnose { trajectory, out, cfg } => {
            let cfg = cfg.resolve()?;
            let out = out.unwrap_or_else(|| trajectory.with_extension("diagnose"));
            let r = runs::run_diagnose(&trajectory, &cfg, &out)?;
            println!("label {} over {} states; report in {}", r.label.name(), r.states, out.display());
        }
        Command::CalibrateGate { out, cfg } => {
            let cfg = cfg.resolve()?;
            let out = out.unwrap_or_else(|| cfg.output_root().join(format!("gate-{}", &cfg.hash()[..12])));
            let r = runs::run_calibrate_gate(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
