use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spen_cli::commands::{EvalSource, GradcheckOptions, PredictOptions};
use spen_cli::{CliError, CliResult};
use spen_core::config::ExperimentConfig;

/// Structured prediction energy networks: train, predict, evaluate and
/// gradient-check experiments described by a config file.
#[derive(Parser)]
#[command(name = "spen", version)]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset to disk.
    GenData {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and write checkpoints and a metrics log.
    Train {
        config: PathBuf,
        /// Run directory (default: `[paths] out` / experiment name).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict a split with a trained checkpoint.
    Predict {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write every iterate and energy.
        #[arg(long)]
        dump_trajectory: bool,
    },
    /// Print the task metric of a checkpoint or of saved predictions.
    Eval {
        config: PathBuf,
        #[arg(
            long,
            conflicts_with = "predictions",
            required_unless_present = "predictions"
        )]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference checks of the configured model.
    Gradcheck {
        config: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long, default_value_t = 24)]
        max_coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a preset as a complete config file.
    ShowPreset { name: String },
}

fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "config file {} does not exist",
            path.display()
        )));
    }
    Ok(ExperimentConfig::load(path)?)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let dir = spen_cli::gen_data(&load_config(&config)?, out.as_deref())?;
            println!("wrote {}", dir.display());
        }
        Command::Train { config, out } => {
            let s = spen_cli::train(&load_config(&config)?, out.as_deref())?;
            println!(
                "best epoch {} dev score {:.4} test score {:.4}; wrote {}",
                s.best_epoch,
                s.best_dev_score,
                s.test_score,
                s.dir.display()
            );
        }
        Command::Predict {
            config,
            checkpoint,
            out,
            split,
            dump_trajectory,
        } => {
            let opts = PredictOptions {
                checkpoint,
                split,
                out,
                dump_trajectory,
            };
            let dir = spen_cli::predict(&load_config(&config)?, &opts)?;
            println!("wrote {}", dir.display());
        }
        Command::Eval {
            config,
            checkpoint,
            predictions,
            split,
        } => {
            let source = match (checkpoint, predictions) {
                (Some(c), None) => EvalSource::Checkpoint(c),
                (None, Some(p)) => EvalSource::Predictions(p),
                _ => {
                    return Err(CliError::Usage(
                        "pass exactly one of --checkpoint and --predictions".into(),
                    ))
                }
            };
            println!(
                "{}",
                spen_cli::eval(&load_config(&config)?, &source, &split)?
            );
        }
        Command::Gradcheck {
            config,
            tolerance,
            max_coords,
            seed,
        } => {
            let opts = GradcheckOptions {
                tolerance,
                max_coords,
                seed,
                ..GradcheckOptions::default()
            };
            let report = spen_cli::gradcheck(&load_config(&config)?, &opts)?;
            for (name, err) in &report.rows {
                println!("{name:<32} {err:.3e}");
            }
            println!("worst relative error {:.3e}", report.worst());
            if !report.passed {
                return Err(CliError::CheckFailed {
                    worst: report.worst(),
                    tolerance,
                });
            }
        }
        Command::ShowPreset { name } => {
            print!("{}", ExperimentConfig::preset(&name)?.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
