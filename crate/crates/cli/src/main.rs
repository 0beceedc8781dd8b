mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Failure;
use crate::config::Preset;

/// THz-style image degradation, J-Net training, evaluation and inference.
#[derive(Debug, Parser)]
#[command(name = "jnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by every subcommand.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, short = 'c', value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.batch=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Defaults the configuration starts from.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Root seed; overrides `seed` in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize LR images (plus `.meta` sidecars) from a directory of HR images.
    Degrade {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory of HR images.
        #[arg(long, short = 'i')]
        input: PathBuf,
        /// Directory receiving LR images and sidecars.
        #[arg(long, short = 'o')]
        output: PathBuf,
    },
    /// Train a network; writes `checkpoint.bin`, `metrics.log` and `config.toml`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// HR training images (overrides `paths.train_dir`).
        #[arg(long)]
        train_dir: Option<PathBuf>,
        /// HR validation images (overrides `paths.val_dir`).
        #[arg(long)]
        val_dir: Option<PathBuf>,
        /// Output directory (overrides `paths.out_dir`).
        #[arg(long, short = 'o')]
        out_dir: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory if present.
        #[arg(long)]
        resume: bool,
        /// Stop once this iteration is reached, as if interrupted.
        #[arg(long, value_name = "ITER")]
        stop_after: Option<u64>,
        /// Suppress per-record progress lines.
        #[arg(long, short = 'q')]
        quiet: bool,
    },
    /// Degrade validation images with a fixed seed and score one method on them.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trained checkpoint; required for `--method model`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// HR validation images (overrides `paths.val_dir`).
        #[arg(long)]
        val_dir: Option<PathBuf>,
        /// model, bicubic, lucy-richardson or passthrough.
        #[arg(long, default_value = "model")]
        method: String,
        /// Directory receiving `report.tsv` and `report.json`.
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Super-resolve one image with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short = 'i')]
        input: PathBuf,
        #[arg(long, short = 'o')]
        output: PathBuf,
    },
    /// Score several methods on aligned LR/HR directories and print a summary table.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        lr_dir: PathBuf,
        #[arg(long)]
        hr_dir: PathBuf,
        /// bicubic, lucy-richardson, passthrough, model[:LABEL]=CHECKPOINT or
        /// external[:LABEL]=DIR. Repeatable.
        #[arg(long = "method", required = true)]
        methods: Vec<String>,
        /// Directory receiving `report.tsv` and `report.json`.
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Degrade { cfg, input, output } => commands::degrade(&cfg, &input, &output),
        Command::Train { cfg, train_dir, val_dir, out_dir, resume, stop_after, quiet } => {
            commands::train(&cfg, commands::TrainArgs { train_dir, val_dir, out_dir, resume, stop_after, quiet })
        }
        Command::Eval { cfg, checkpoint, val_dir, method, report_dir } => {
            commands::eval(&cfg, checkpoint.as_deref(), val_dir, &method, report_dir.as_deref())
        }
        Command::Infer { checkpoint, input, output } => commands::infer(&checkpoint, &input, &output),
        Command::Compare { cfg, lr_dir, hr_dir, methods, report_dir } => {
            commands::compare(&cfg, &lr_dir, &hr_dir, &methods, report_dir.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
