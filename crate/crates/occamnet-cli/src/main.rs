//! `occamnet`: train, evaluate, sweep, and visualize sparsity-gated
//! recurrent networks. Set `OCCAMNET_LOG=debug` for per-epoch progress.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use occamnet_cli::args::{DataArgs, ModelArgs, SparsityArgs, TrainArgs};
use occamnet_cli::config::{self, FormatArg, SplitArg};
use occamnet_cli::{check, sweep, synth, task, visualize};

#[derive(Parser, Debug)]
#[command(
    name = "occamnet",
    about = "Sparsity-gated recurrent networks: training, evaluation, sweeps, and gate-trace reports",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint plus a metrics file.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        sparsity: SparsityArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint output path.
        #[arg(long, default_value = "model.ckpt")]
        checkpoint: PathBuf,
        /// Metrics output path (JSON lines, config header first).
        #[arg(long, default_value = "metrics.jsonl")]
        metrics_out: PathBuf,
    },
    /// Evaluate a checkpoint and print a metrics record.
    Eval {
        /// Checkpoint to load.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Data file to evaluate (defaults to the file recorded at train
        /// time; unused by the needle task).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Generated split to evaluate for the needle task.
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
    },
    /// Train every grid cell and tabulate the results as TSV.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        sparsity: SparsityArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated hidden sizes (default: the resolved --hidden).
        #[arg(long)]
        hidden_grid: Option<String>,
        /// Comma-separated penalty ceilings.
        #[arg(long, default_value = "0,1e-4,1e-3,1e-2")]
        lambda_grid: String,
        /// Comma-separated regimens (default: the --regimen value).
        #[arg(long)]
        regimen_grid: Option<String>,
        /// Results table path.
        #[arg(long, default_value = "sweep.tsv")]
        out: PathBuf,
    },
    /// Render one example's gate activations as a heatmap.
    Visualize {
        /// Checkpoint to load.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Example index within the data file (needle: validation split).
        #[arg(long, default_value_t = 0)]
        example: usize,
        /// Data file (defaults to the file recorded at train time).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report format.
        #[arg(long, value_enum, default_value_t = FormatArg::Html)]
        format: FormatArg,
        /// Output path; ansi defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset file.
    GenSynthetic(synth::SynthArgs),
    /// Compare reverse-mode gradients against central differences.
    GradCheck(check::CheckArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("OCCAMNET_LOG", "warn"))
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(feature = "parallel")]
fn configure_pool(jobs: usize) {
    if jobs > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
}

#[cfg(not(feature = "parallel"))]
fn configure_pool(_jobs: usize) {}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            model,
            sparsity,
            train,
            data,
            checkpoint,
            metrics_out,
        } => {
            configure_pool(train.jobs);
            let cfg = config::resolve(&model, &sparsity, &train, &data)?;
            let summary = task::run_training(&cfg, Some(&checkpoint), Some(&metrics_out))?;
            println!("{}", serde_json::to_string(&summary)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            checkpoint,
            data,
            split,
        } => {
            let report = task::run_eval(&checkpoint, data.as_deref(), split)?;
            println!("{}", serde_json::to_string(&report)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            model,
            sparsity,
            train,
            data,
            hidden_grid,
            lambda_grid,
            regimen_grid,
            out,
        } => {
            let base = config::resolve(&model, &sparsity, &train, &data)?;
            sweep::run_sweep(
                &base,
                hidden_grid.as_deref(),
                &lambda_grid,
                regimen_grid.as_deref(),
                train.jobs,
                &out,
            )?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Visualize {
            checkpoint,
            example,
            data,
            format,
            out,
        } => {
            visualize::run_visualize(&checkpoint, example, data.as_deref(), format, out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::GenSynthetic(args) => {
            synth::run_gen(&args)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::GradCheck(args) => check::run_gradcheck(&args),
    }
}
