//! Line-oriented `key = value` config files.
//!
//! Flags always win over file values, which win over built-in defaults.
//! Blank lines and `#` comments are ignored. Keys a command does not know
//! are rejected by name rather than silently dropped.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use roadcast_core::{Error, Result};

#[derive(Debug, Default)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "config line {} is not `key = value`: {raw:?}",
                    lineno + 1
                ))
            })?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if key.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "config line {} has an empty key",
                    lineno + 1
                )));
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "config key '{key}' given more than once"
                )));
            }
        }
        Ok(ConfigFile { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Errors on any key outside `allowed`, naming the first offender.
    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        for key in self.entries.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "unknown config key '{key}' (expected one of: {})",
                    allowed.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Typed lookup; `None` when the key is absent.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                Error::InvalidConfig(format!("config key '{key}' has unusable value {raw:?}"))
            }),
        }
    }
}

/// Three-way resolution: explicit flag, then config file, then default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
