//! Experiment driver: generate a synthetic silhouette dataset, train the
//! 4-fold ensemble, and query it with rotated images.
//!
//! Exit codes are a stable scripting contract: 0 success, 2 configuration
//! error, 3 data or checkpoint error, 4 input-image error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use commands::{cmd_eval, cmd_gen_data, cmd_predict, cmd_train, CmdError, EXIT_CONFIG};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "lunar-cnn", version, about = "Silhouette classifier experiments")]
struct Cli {
    /// key=value configuration file (flags override it)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset tree and the query image pair
    GenData {
        /// Dataset root to write
        #[arg(long)]
        data: Option<PathBuf>,
        /// Per-class image counts, e.g. 100,100,105
        #[arg(long)]
        counts: Option<String>,
        /// Image side length
        #[arg(long)]
        image: Option<usize>,
    },
    /// Train the 4-fold ensemble; writes checkpoints, histories, summary
    Train {
        /// Dataset root to read
        #[arg(long)]
        data: Option<PathBuf>,
        /// Epochs per fold
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Re-evaluate saved checkpoints on the seeded test split
    Eval {
        /// Dataset root to read
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Classify one PGM image with the saved ensemble
    Predict {
        /// Dataset root, for class display names
        #[arg(long)]
        data: Option<PathBuf>,
        /// Input image
        #[arg(long)]
        image: PathBuf,
        /// Test all four 90-degree rotations
        #[arg(long)]
        rotations: bool,
    },
}

fn build_config(cli: &Cli) -> Result<RunConfig, CmdError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path).map_err(|e| CmdError {
            code: EXIT_CONFIG,
            message: e.to_string(),
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CmdError> {
    let mut cfg = build_config(cli)?;
    match &cli.command {
        Command::GenData {
            data,
            counts,
            image,
        } => {
            if let Some(data) = data {
                cfg.data = data.clone();
            }
            if let Some(counts) = counts {
                cfg.set("counts", counts, 0).map_err(|e| CmdError {
                    code: EXIT_CONFIG,
                    message: e.message,
                })?;
            }
            if let Some(image) = image {
                cfg.image = *image;
            }
            cmd_gen_data(&cfg)
        }
        Command::Train { data, epochs } => {
            if let Some(data) = data {
                cfg.data = data.clone();
            }
            if let Some(epochs) = epochs {
                cfg.epochs = *epochs;
            }
            cmd_train(&cfg)
        }
        Command::Eval { data } => {
            if let Some(data) = data {
                cfg.data = data.clone();
            }
            cmd_eval(&cfg)
        }
        Command::Predict {
            data,
            image,
            rotations,
        } => {
            if let Some(data) = data {
                cfg.data = data.clone();
            }
            cmd_predict(&cfg, image, *rotations)
        }
    }
}

/// Training allocates and frees large activation buffers every step; with
/// glibc's default thresholds each one becomes a fresh mmap plus a page
/// fault per touched page. Raising the thresholds keeps those buffers in
/// the arena, where they are reused. Best effort: other allocators simply
/// ignore unknown parameters or lack the symbol at which point we skip it.
#[cfg(target_env = "gnu")]
fn tune_allocator() {
    extern "C" {
        fn mallopt(param: libc_int, value: libc_int) -> libc_int;
    }
    #[allow(non_camel_case_types)]
    type libc_int = std::os::raw::c_int;
    const M_MMAP_THRESHOLD: libc_int = -3;
    const M_TRIM_THRESHOLD: libc_int = -1;
    unsafe {
        mallopt(M_MMAP_THRESHOLD, 512 << 20);
        mallopt(M_TRIM_THRESHOLD, 512 << 20);
    }
}

#[cfg(not(target_env = "gnu"))]
fn tune_allocator() {}

fn main() -> ExitCode {
    tune_allocator();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
