//! Flat `key = value` run configuration.
//!
//! Commands resolve each setting as: command-line flag, then config file,
//! then built-in default. The config path comes from `--config` or, failing
//! that, the `CONTEXT_LENS_CONFIG` environment variable. Keys may repeat
//! (`covariate = …` twice accumulates); for single-valued keys the last
//! occurrence wins.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

pub const CONFIG_ENV_VAR: &str = "CONTEXT_LENS_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config line {line}: expected \"key = value\", found {text:?}")]
    BadLine { line: usize, text: String },
    #[error("config key {key:?}: cannot parse {value:?} ({reason})")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
}

/// Parsed config file contents.
#[derive(Debug, Clone, Default)]
pub struct FileConfig {
    values: HashMap<String, Vec<String>>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values: HashMap<String, Vec<String>> = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::BadLine {
                    line: idx + 1,
                    text: raw.to_string(),
                });
            };
            values
                .entry(key.trim().to_string())
                .or_default()
                .push(value.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    /// Last value for a key, if any.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.values
            .get(key)
            .and_then(|v| v.last())
            .map(String::as_str)
    }

    /// Every value for a repeatable key, in file order.
    pub fn get_all(&self, key: &str) -> Vec<String> {
        self.values.get(key).cloned().unwrap_or_default()
    }

    /// Parse the last value for a key.
    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| ConfigError::BadValue {
                    key: key.to_string(),
                    value: raw.to_string(),
                    reason: e.to_string(),
                }),
        }
    }
}

/// Locate the active config: `--config` if given, else the environment
/// variable, else none.
pub fn discover(explicit: Option<&Path>) -> Result<Option<FileConfig>, ConfigError> {
    if let Some(path) = explicit {
        return FileConfig::load(path).map(Some);
    }
    match std::env::var_os(CONFIG_ENV_VAR) {
        Some(path) => FileConfig::load(Path::new(&path)).map(Some),
        None => Ok(None),
    }
}
