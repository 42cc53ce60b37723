mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "radcam", version, about = "Camera + 4D radar 3D object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; missing keys take defaults.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Dataset directory (overrides paths.data_root).
    #[arg(long, env = "RADCAM_DATA_ROOT")]
    pub data: Option<PathBuf>,
    /// Run directory (overrides paths.output).
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Root seed (overrides `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    GenerateData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        count: Option<usize>,
        /// Replace an existing non-empty dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model and write checkpoints plus metrics logs.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Query count; must be a perfect square.
        #[arg(long)]
        queries: Option<usize>,
        /// Input subset: C, R_AE, R_RA, R, C+R_AE, C+R_RA or C+R.
        #[arg(long)]
        modalities: Option<String>,
        /// Continue from a checkpoint (its model and schedule win over the config).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write report JSON and CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Zero one sensor's input: camera, radar or none.
        #[arg(long)]
        fail_modality: Option<String>,
    },
    /// Write per-frame detections.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        min_score: Option<f64>,
    },
    /// Time forward passes on one frame.
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// Without a checkpoint, a freshly initialised model from the config is timed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenerateData { common, count, force } => commands::generate_data(&common, count, force),
        Command::Train {
            common,
            epochs,
            lr,
            batch_size,
            queries,
            modalities,
            resume,
        } => commands::train(
            &common,
            commands::TrainOverrides {
                epochs,
                lr,
                batch_size,
                queries,
                modalities,
            },
            resume.as_deref(),
        ),
        Command::Eval {
            common,
            checkpoint,
            fail_modality,
        } => commands::eval(&common, &checkpoint, fail_modality.as_deref()),
        Command::Infer {
            common,
            checkpoint,
            min_score,
        } => commands::infer(&common, &checkpoint, min_score),
        Command::Benchmark {
            common,
            checkpoint,
            runs,
            warmup,
        } => commands::benchmark(&common, checkpoint.as_deref(), runs, warmup),
    }
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
