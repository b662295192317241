//! `casa`: stain decomposition, budget calibration, stain augmentation and a
//! small training demo on synthetic multi-center data.

mod commands;
mod data;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use commands::{AugmentMode, InitArg, Method, SplitArg};
use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "casa", version, about = "Calibrated adversarial stain augmentation", arg_required_else_help = true)]
struct Cli {
    /// Worker threads (defaults to the number of cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Seed for every random choice.
    #[arg(long, global = true, env = "CASA_SEED", default_value_t = 0)]
    seed: u64,

    /// More log output on standard error (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the stain matrix of one image.
    Decompose {
        #[arg(long)]
        image: PathBuf,
        /// Stain matrix JSON (standard output when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-pixel concentrations as CSV.
        #[arg(long)]
        concentrations: Option<PathBuf>,
    },
    /// Calibrate stain budgets from a directory of images or from saved statistics.
    Calibrate {
        #[arg(long, conflicts_with = "stats_in", required_unless_present = "stats_in")]
        images: Option<PathBuf>,
        /// CSV with header image_id,alpha_rad,r_h,r_e.
        #[arg(long)]
        stats_in: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, default_value_t = 0.05)]
        beta: f64,
        #[arg(long)]
        out: PathBuf,
        /// Write per-image statistics as CSV.
        #[arg(long)]
        stats_out: Option<PathBuf>,
    },
    /// Perturb every image inside a budget, randomly or adversarially.
    Augment {
        #[arg(long, value_enum)]
        mode: AugmentMode,
        /// A PNG file or a directory searched recursively.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        budget: PathBuf,
        /// Checkpoint attacked in adversarial mode.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Label for images outside 0/1 directories.
        #[arg(long)]
        label: Option<usize>,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Run the stain-space attack on one image.
    Attack {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        budget: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Defaults to the parent directory name when it is 0 or 1.
        #[arg(long)]
        label: Option<usize>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, value_enum, default_value = "zero")]
        init: InitArg,
        #[arg(long)]
        out_image: Option<PathBuf>,
        /// Attack result JSON (standard output when absent).
        #[arg(long)]
        out_json: Option<PathBuf>,
    },
    /// Write a synthetic multi-center dataset as PNGs plus manifest.json.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Partial synthetic configuration as JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        patches_per_class: Option<usize>,
    },
    /// Train the toy classifier on synthetic data and report held-out accuracy.
    TrainDemo {
        #[arg(long, value_enum, default_value = "casa")]
        method: Method,
        /// Budget JSON (defaults to the one calibrated with the data).
        #[arg(long)]
        budget: Option<PathBuf>,
        /// Directory written by `generate` (generated in memory from the seed when absent).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        patches_per_class: Option<usize>,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        learning_rate: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        out_checkpoint: Option<PathBuf>,
        /// Per-epoch CSV: epoch,clean_loss,adv_loss,train_acc.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint per (center, label) group.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        patches_per_class: Option<usize>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Report JSON (standard output when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot set thread count: {e}")))?;
    }
    let seed = cli.seed;
    match &cli.command {
        Command::Decompose { image, out, concentrations } => {
            commands::decompose(image, out.as_deref(), concentrations.as_deref())
        }
        Command::Calibrate { images, stats_in, delta, beta, out, stats_out } => {
            commands::calibrate(&commands::CalibrateArgs {
                images: images.as_deref(),
                stats_in: stats_in.as_deref(),
                delta: *delta,
                beta: *beta,
                out,
                stats_out: stats_out.as_deref(),
            })
        }
        Command::Augment { mode, input, out, budget, model, label, k } => commands::augment(&commands::AugmentArgs {
            mode: *mode,
            input,
            out,
            budget,
            model: model.as_deref(),
            label: *label,
            k: *k,
            seed,
        }),
        Command::Attack { image, budget, model, label, k, init, out_image, out_json } => {
            commands::attack(&commands::AttackArgs {
                image,
                budget,
                model,
                label: *label,
                k: *k,
                init: *init,
                seed,
                out_image: out_image.as_deref(),
                out_json: out_json.as_deref(),
            })
        }
        Command::Generate { out, config, patches_per_class } => {
            commands::generate(out, config.as_deref(), *patches_per_class, seed)
        }
        Command::TrainDemo {
            method,
            budget,
            data,
            patches_per_class,
            epochs,
            learning_rate,
            batch_size,
            k,
            out_checkpoint,
            log,
        } => commands::train_demo(&commands::TrainArgs {
            method: *method,
            budget: budget.as_deref(),
            data: data.as_deref(),
            patches_per_class: *patches_per_class,
            epochs: *epochs,
            learning_rate: *learning_rate,
            batch_size: *batch_size,
            k: *k,
            seed,
            out_checkpoint: out_checkpoint.as_deref(),
            log: log.as_deref(),
        }),
        Command::Eval { checkpoint, data, patches_per_class, split, out } => commands::eval(&commands::EvalArgs {
            checkpoint,
            data: data.as_deref(),
            patches_per_class: *patches_per_class,
            split: *split,
            seed,
            out: out.clone(),
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
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
        Err(err) => {
            eprintln!("casa: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
