use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cascade_core::{Error, ErrorCategory};
use clap::{Parser, Subcommand};

mod commands;
mod meta;
mod sink;

#[derive(Parser, Debug)]
#[command(name = "vnet-cascade", version, about = "Two-stage V-Net brain tumor segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labelled cohort.
    Phantom {
        /// cohort directory to create
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// seed of the first subject; later subjects count up from it
        #[arg(long)]
        seed: Option<u64>,
        /// phantom description (TOML)
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Split a cohort into training and development subjects (writes split.json).
    Split {
        #[arg(long)]
        cohort: PathBuf,
        /// share of subjects used for training
        #[arg(long, default_value_t = 0.7)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one network of the cascade.
    Train {
        /// 1 = whole-tumor detector, 2 = four-class segmenter
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// training configuration (TOML); stage defaults otherwise
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        cohort: PathBuf,
        /// model directory; receives net1.ckpt or net2.ckpt
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// continue from a training checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Segment scans with a trained cascade.
    Infer {
        /// model directory holding net1.ckpt, net2.ckpt and optionally cascade.json
        #[arg(long)]
        model: PathBuf,
        /// a subject directory or a cohort directory
        #[arg(long)]
        scan_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a model against ground truth.
    Eval {
        /// model directory, or `oracle` to score the ground truth against itself
        #[arg(long)]
        model: String,
        #[arg(long)]
        cohort: PathBuf,
        /// report path; .json and .tsv select those formats, anything else gets the table
        #[arg(long)]
        report: PathBuf,
        /// subjects to score; defaults to the development split when split.json exists
        #[arg(long, value_enum)]
        subset: Option<commands::Subset>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => 3,
        ErrorCategory::Io => 4,
        ErrorCategory::Format => 5,
        ErrorCategory::Numeric => 6,
    }
}

fn category_tag(c: ErrorCategory) -> &'static str {
    match c {
        ErrorCategory::Config => "config",
        ErrorCategory::Io => "io",
        ErrorCategory::Format => "format",
        ErrorCategory::Numeric => "numeric",
    }
}

fn run(cli: Cli, argv: &[OsString]) -> cascade_core::Result<()> {
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match cli.command {
        Command::Phantom { out, count, seed, spec } => commands::phantom(&out, count, seed, spec.as_deref(), &argv),
        Command::Split { cohort, fraction, seed } => commands::split(&cohort, fraction, seed, &argv),
        Command::Train {
            stage,
            config,
            cohort,
            out,
            seed,
            resume,
        } => commands::train(
            commands::TrainArgs {
                stage,
                config: config.as_deref(),
                cohort: &cohort,
                out: &out,
                seed,
                resume: resume.as_deref(),
            },
            &argv,
        ),
        Command::Infer { model, scan_dir, out_dir } => commands::infer(&model, &scan_dir, &out_dir, &argv),
        Command::Eval {
            model,
            cohort,
            report,
            subset,
        } => commands::eval(&model, &cohort, &report, subset, &argv),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let argv: Vec<OsString> = std::env::args_os().collect();
    let cli = Cli::parse_from(&argv);
    match run(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", category_tag(e.category()));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Read a TOML file into `T`.
fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> cascade_core::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
