//! One module per subcommand. Every command resolves its configuration
//! through [`Resolver`], writes artifacts into the run directory, and
//! returns the resolved snapshot plus artifact list for the manifest.

use std::collections::BTreeMap;
use std::path::Path;

use neurodiv_core::training::TrainingError;

use crate::config::FileConfig;
use crate::CliError;

pub mod corrupt;
pub mod cost;
pub mod diversity;
pub mod theory;
pub mod train;

/// Shared per-run context.
pub struct Ctx<'a> {
    pub file: &'a FileConfig,
    pub out_dir: &'a Path,
    pub seed: u64,
}

/// What a command hands back for the manifest. A `failure` is reported
/// (with its exit code) only after the manifest and artifacts are on
/// disk, so failed runs stay reproducible.
pub struct RunOutput {
    pub resolved: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
    pub failure: Option<CliError>,
}

pub fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

pub fn io_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Io(e.to_string())
}

/// Training errors split into "your config is wrong" and "the run went
/// numerically wrong".
pub fn train_err(e: TrainingError) -> CliError {
    match e {
        TrainingError::BadWarmup(_)
        | TrainingError::BadLambda(_)
        | TrainingError::BadDropout(_)
        | TrainingError::ZeroField(_)
        | TrainingError::SampleOutOfRange { .. }
        | TrainingError::PairBudget { .. }
        | TrainingError::StreamMismatch { .. }
        | TrainingError::SeqMismatch { .. }
        | TrainingError::BackboneNotFrozen
        | TrainingError::BadBtVariant(_)
        | TrainingError::Model(_) => CliError::Usage(e.to_string()),
        _ => CliError::Numerical(e.to_string()),
    }
}
