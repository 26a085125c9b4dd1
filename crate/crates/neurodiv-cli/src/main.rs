//! `neurodiv`: command-line front end for the parallel-stream diversity
//! lab. Every subcommand resolves a flat key=value config (file, then
//! `--set` overrides, then dedicated flags), derives all randomness from
//! one `--seed`, writes its artifacts plus a `manifest.json` into
//! `--out-dir`, and can be replayed bit-identically from that manifest.

mod config;
mod manifest;
mod commands;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use commands::{Ctx, RunOutput};
use config::FileConfig;
use manifest::RunManifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments, config keys, or inputs. Exit code 2.
    #[error("{0}")]
    Usage(String),
    /// The computation itself went wrong (divergence, non-finite values).
    /// Exit code 3.
    #[error("{0}")]
    Numerical(String),
    /// A verified property failed (certification cell, replay mismatch).
    /// Exit code 4.
    #[error("{0}")]
    Certification(String),
    /// Filesystem trouble. Exit code 1.
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Certification(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "neurodiv",
    version,
    about = "Parallel-stream diversity lab: bounds, training, interventions, costs"
)]
struct Cli {
    /// Flat key=value config file (section.key = value per line).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Root seed; every random stream is derived from it by name.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Directory for artifacts and the run manifest.
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    out_dir: PathBuf,

    /// Worker threads (0 = library default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Override one config key (repeatable), e.g. --set train.steps=100.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit the failure-bound curve and certify the variance/bound
    /// formulas by Monte Carlo simulation.
    Theory,
    /// Pretrain the toy backbone, fine-tune one arm, emit traces and a
    /// checkpoint.
    Train {
        /// Recipe: standard, parscale, parscale_bt, stream, ndlora,
        /// dropout.
        #[arg(long)]
        arm: Option<neurodiv_core::training::Arm>,
        /// Fine-tuning steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a checkpoint's stream separation on held-out data.
    Diversity {
        /// Trained multi-stream checkpoint.
        #[arg(long)]
        checkpoint: Option<String>,
        /// Feature normalization: whiten or standardize.
        #[arg(long)]
        normalization: Option<neurodiv_core::diversity::Normalization>,
    },
    /// Paired corruption experiment on a trained checkpoint.
    Corrupt {
        /// Trained multi-stream checkpoint.
        #[arg(long)]
        checkpoint: Option<String>,
        /// Fraction of token positions to splice.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Emit the per-variant training-step cost table.
    Cost {
        /// Also compute a custom variant with this many streams.
        #[arg(long)]
        streams: Option<usize>,
        /// Print the lifecycle amortization factor.
        #[arg(long)]
        amortize: bool,
    },
    /// Re-run a recorded manifest and optionally verify artifacts match.
    Replay {
        /// Manifest of the run to reproduce.
        #[arg(long)]
        manifest: PathBuf,
        /// Byte-compare the replayed artifacts against the originals.
        #[arg(long)]
        check: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Theory => "theory",
            Command::Train { .. } => "train",
            Command::Diversity { .. } => "diversity",
            Command::Corrupt { .. } => "corrupt",
            Command::Cost { .. } => "cost",
            Command::Replay { .. } => "replay",
        }
    }
}

fn dispatch(name: &str, ctx: &Ctx, command: Option<&Command>) -> Result<RunOutput, CliError> {
    match (name, command) {
        ("theory", _) => commands::theory::run(ctx),
        ("train", cmd) => {
            let flags = match cmd {
                Some(Command::Train { arm, steps }) => commands::train::Flags {
                    arm: *arm,
                    steps: *steps,
                },
                _ => commands::train::Flags { arm: None, steps: None },
            };
            commands::train::run(ctx, &flags)
        }
        ("diversity", cmd) => {
            let flags = match cmd {
                Some(Command::Diversity { checkpoint, normalization }) => {
                    commands::diversity::Flags {
                        checkpoint: checkpoint.clone(),
                        normalization: *normalization,
                    }
                }
                _ => commands::diversity::Flags { checkpoint: None, normalization: None },
            };
            commands::diversity::run(ctx, &flags)
        }
        ("corrupt", cmd) => {
            let flags = match cmd {
                Some(Command::Corrupt { checkpoint, fraction }) => commands::corrupt::Flags {
                    checkpoint: checkpoint.clone(),
                    fraction: *fraction,
                },
                _ => commands::corrupt::Flags { checkpoint: None, fraction: None },
            };
            commands::corrupt::run(ctx, &flags)
        }
        ("cost", cmd) => {
            let flags = match cmd {
                Some(Command::Cost { streams, amortize }) => commands::cost::Flags {
                    streams: *streams,
                    amortize: *amortize,
                },
                _ => commands::cost::Flags { streams: None, amortize: false },
            };
            commands::cost::run(ctx, &flags)
        }
        (other, _) => Err(CliError::Usage(format!(
            "manifest names unknown subcommand {other:?}"
        ))),
    }
}

/// Runs one subcommand end to end: resolve, execute, write the manifest,
/// then surface any deferred failure.
fn execute(
    name: &str,
    file: &FileConfig,
    out_dir: &Path,
    seed: u64,
    threads: usize,
    command: Option<&Command>,
) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Io(format!("create {}: {e}", out_dir.display())))?;
    let record = RunManifest::begin(name, seed, threads);
    let ctx = Ctx { file, out_dir, seed };
    let output = dispatch(name, &ctx, command)?;
    let path = record.finish(out_dir, output.resolved, output.artifacts)?;
    println!("manifest: {}", path.display());
    match output.failure {
        Some(failure) => Err(failure),
        None => Ok(()),
    }
}

fn replay(manifest_path: &Path, out_dir: &Path, check: bool, threads: usize) -> Result<(), CliError> {
    let recorded = RunManifest::load(manifest_path)?;
    let original_dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let file = FileConfig::from_snapshot(recorded.config.clone());
    println!(
        "replaying {} (seed {}) into {}",
        recorded.subcommand,
        recorded.seed,
        out_dir.display()
    );
    execute(
        &recorded.subcommand,
        &file,
        out_dir,
        recorded.seed,
        threads,
        None,
    )?;
    if check {
        let mismatched = manifest::compare_artifacts(&original_dir, out_dir, &recorded.artifacts)?;
        if !mismatched.is_empty() {
            return Err(CliError::Certification(format!(
                "replay mismatch in {}: {}",
                recorded.subcommand,
                mismatched.join(", ")
            )));
        }
        println!(
            "replay verified: {} artifact(s) bit-identical",
            recorded.artifacts.len()
        );
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Replay { manifest, check } => {
            let out_dir = if cli.out_dir == Path::new("out") {
                manifest
                    .parent()
                    .unwrap_or_else(|| Path::new("."))
                    .join("replay")
            } else {
                cli.out_dir.clone()
            };
            replay(manifest, &out_dir, *check, cli.threads)
        }
        command => {
            let mut file = FileConfig::load(cli.config.as_deref())?;
            file.apply_overrides(&cli.set)?;
            execute(
                command.name(),
                &file,
                &cli.out_dir,
                cli.seed,
                cli.threads,
                Some(command),
            )
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
