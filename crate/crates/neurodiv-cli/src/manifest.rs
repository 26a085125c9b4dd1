//! Run manifests: one JSON record per run capturing everything needed to
//! reproduce it — subcommand, resolved config snapshot, seed, and the
//! artifacts written — plus timestamps and the tool version.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    /// Tool name and version that produced the run.
    pub version: String,
    pub subcommand: String,
    pub seed: u64,
    /// Worker threads requested (0 = library default).
    pub threads: usize,
    /// Every config key the run resolved, with its final value.
    pub config: BTreeMap<String, String>,
    /// Artifact file names, relative to the manifest's directory.
    pub artifacts: Vec<String>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl RunManifest {
    pub fn begin(subcommand: &str, seed: u64, threads: usize) -> Self {
        RunManifest {
            version: format!("neurodiv {}", env!("CARGO_PKG_VERSION")),
            subcommand: subcommand.to_string(),
            seed,
            threads,
            config: BTreeMap::new(),
            artifacts: Vec::new(),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
        }
    }

    /// Writes `manifest.json` into `out_dir` with the final timestamp.
    pub fn finish(
        mut self,
        out_dir: &Path,
        config: BTreeMap<String, String>,
        artifacts: Vec<String>,
    ) -> Result<PathBuf, CliError> {
        self.config = config;
        self.artifacts = artifacts;
        self.finished_unix_ms = now_ms();
        let path = out_dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&self)
            .map_err(|e| CliError::Io(format!("serialize manifest: {e}")))?;
        std::fs::write(&path, text + "\n")
            .map_err(|e| CliError::Io(format!("write {}: {e}", path.display())))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("malformed manifest {}: {e}", path.display())))
    }
}

/// Byte-compares each artifact of a replayed run against the originals.
/// Returns the mismatched file names.
pub fn compare_artifacts(
    original_dir: &Path,
    replay_dir: &Path,
    artifacts: &[String],
) -> Result<Vec<String>, CliError> {
    let mut mismatched = Vec::new();
    for name in artifacts {
        let read = |dir: &Path| -> Result<Vec<u8>, CliError> {
            let p = dir.join(name);
            std::fs::read(&p).map_err(|e| CliError::Io(format!("read {}: {e}", p.display())))
        };
        if read(original_dir)? != read(replay_dir)? {
            mismatched.push(name.clone());
        }
    }
    Ok(mismatched)
}
