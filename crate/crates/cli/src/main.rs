//! Command-line front end: dataset generation, training, sampling,
//! evaluation, efficiency accounting, and numerics self-checks.
//!
//! Exit codes: 0 success, 1 invalid configuration or input, 2 runtime
//! failure. Set `DECLOUD_OUT_DIR` to redirect relative output paths.

mod commands;
mod config;
mod png;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "decloud",
    about = "Multi-temporal cloud removal with a conditional diffusion model",
    long_about = "Generates synthetic multi-temporal datasets, trains the conditional \
                  denoising model, samples cloud-free reconstructions in 1..T steps, and \
                  evaluates PSNR/SSIM (computed in the [0,1] display domain after mapping \
                  from the [-1,1] data range)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-temporal dataset container.
    GenData {
        /// Output container base path (writes <out>.json + <out>.bin).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Square image size; must be a multiple of 8.
        #[arg(long)]
        hw: usize,
        /// Temporal views per sample.
        #[arg(long = "N", default_value_t = 3)]
        n_temporal: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        /// Split tag recorded per sample.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Train from a JSON run config; checkpoints land in its output_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample reconstructions for every dataset entry.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Refinement steps (1..=T).
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample with raw weights instead of the EMA shadow.
        #[arg(long)]
        raw_weights: bool,
        /// Only the first N samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// PSNR/SSIM report for a prediction container against a dataset.
    Eval {
        /// Prediction container (written by `sample`).
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Report path; prints to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic parameter/MAC counts for a model or run config.
    Count {
        #[arg(long)]
        config: PathBuf,
        /// Square input size for the MAC count.
        #[arg(long, default_value_t = 256)]
        hw: usize,
        /// Include the per-section breakdown.
        #[arg(long)]
        sections: bool,
    },
    /// Numerics self-checks (gradient verification).
    Check,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            out,
            seed,
            n,
            hw,
            n_temporal,
            channels,
            split,
        } => commands::cmd_gen_data(&out, seed, n, hw, n_temporal, channels, &split),
        Command::Train { config, resume } => commands::cmd_train(&config, resume.as_deref()),
        Command::Sample {
            checkpoint,
            dataset,
            steps,
            out,
            seed,
            raw_weights,
            limit,
        } => commands::cmd_sample(
            &checkpoint,
            &dataset,
            steps,
            &out,
            seed,
            !raw_weights,
            limit,
        ),
        Command::Eval { pred, dataset, out } => commands::cmd_eval(&pred, &dataset, out.as_deref()),
        Command::Count {
            config,
            hw,
            sections,
        } => commands::cmd_count(&config, hw, sections),
        Command::Check => commands::cmd_check(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
