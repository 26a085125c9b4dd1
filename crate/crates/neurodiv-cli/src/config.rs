//! Flat key=value configuration with section prefixes.
//!
//! A config file is a list of `section.key = value` lines; `#` starts a
//! comment. Values from `--set key=value` flags override the file, and
//! dedicated subcommand flags override both. Every key a subcommand reads
//! is recorded with its final value, so the manifest's config snapshot
//! replays to identical resolutions without consulting defaults.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Raw key/value layers before typed resolution.
#[derive(Debug, Clone, Default)]
pub struct FileConfig {
    map: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut config = FileConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!(
                        "{}:{}: expected key = value, got {raw:?}",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                config
                    .map
                    .insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(config)
    }

    /// Applies `--set key=value` overrides on top of the file.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        for entry in overrides {
            let (key, value) = entry.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("--set expects key=value, got {entry:?}"))
            })?;
            self.map
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(())
    }

    /// Rebuilds the layer a manifest snapshot recorded.
    pub fn from_snapshot(map: BTreeMap<String, String>) -> Self {
        FileConfig { map }
    }
}

/// Typed, recorded resolution over one [`FileConfig`].
pub struct Resolver<'a> {
    file: &'a FileConfig,
    resolved: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl<'a> Resolver<'a> {
    pub fn new(file: &'a FileConfig) -> Self {
        Resolver {
            file,
            resolved: BTreeMap::new(),
            used: BTreeSet::new(),
        }
    }

    /// Resolves one key: dedicated flag, then file/--set value, then the
    /// default. The outcome lands in the snapshot either way.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display + Clone,
        T::Err: Display,
    {
        self.used.insert(key.to_string());
        let value = if let Some(v) = flag {
            v
        } else if let Some(raw) = self.file.map.get(key) {
            raw.parse::<T>()
                .map_err(|e| CliError::Usage(format!("config key {key}: {e} (got {raw:?})")))?
        } else {
            default
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// A key with no default: required from flag or file.
    pub fn require(&mut self, key: &str, flag: Option<String>) -> Result<String, CliError> {
        self.used.insert(key.to_string());
        let value = flag
            .or_else(|| self.file.map.get(key).cloned())
            .ok_or_else(|| CliError::Usage(format!("missing required config key {key}")))?;
        self.resolved.insert(key.to_string(), value.clone());
        Ok(value)
    }

    /// Finishes resolution. One file may serve several subcommands, so
    /// sections this command never touched pass through silently; an
    /// unread key inside a section it did read is a typo.
    pub fn finish(self) -> Result<BTreeMap<String, String>, CliError> {
        let section = |key: &str| key.split('.').next().unwrap_or(key).to_string();
        let read_sections: BTreeSet<String> = self.used.iter().map(|k| section(k)).collect();
        for key in self.file.map.keys() {
            if !self.used.contains(key) && read_sections.contains(&section(key)) {
                return Err(CliError::Usage(format!("unknown config key {key}")));
            }
        }
        Ok(self.resolved)
    }
}
