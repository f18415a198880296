//! Plain-text `key=value` configuration with typed lookups.

use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key {key}")]
    Duplicate { line: usize, key: String },
    #[error("invalid value {value:?} for {key}: {reason}")]
    Invalid { key: String, value: String, reason: String },
    #[error("unknown key {0}")]
    Unknown(String),
    #[error("reading {path}: {reason}")]
    Io { path: String, reason: String },
}

/// Ordered key/value pairs. `#` starts a comment line; blank lines are ignored.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: IndexMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = IndexMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if entries.insert(key.to_owned(), v.trim().to_owned()).is_some() {
                return Err(ConfigError::Duplicate {
                    line: i + 1,
                    key: key.to_owned(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Sets `key`, replacing any earlier value.
    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    /// Applies `key=value` overrides on top of this config.
    pub fn merge_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<(), ConfigError> {
        for (i, o) in overrides.into_iter().enumerate() {
            let (k, v) = o.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get_str(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| ConfigError::Invalid {
                    key: key.to_owned(),
                    value: v.to_owned(),
                    reason: e.to_string(),
                })
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Fails on the first key outside `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<(), ConfigError> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(ConfigError::Unknown(k.clone())),
            None => Ok(()),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        self.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
