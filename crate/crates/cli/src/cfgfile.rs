//! Flat key=value config files. Lines are `key = value`, `#` starts a
//! comment, keys use the long flag names with underscores. Values from the
//! file override defaults; explicit command-line flags override the file.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Default, Clone)]
pub struct KvConfig {
    values: HashMap<String, String>,
}

impl KvConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
        let mut values = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "{}:{}: expected key=value, got {raw:?}",
                    path.display(),
                    idx + 1
                )));
            };
            values.insert(key.trim().replace('-', "_"), value.trim().to_string());
        }
        Ok(KvConfig { values })
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Parsed value for `key`, if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                CliError::Usage(format!("config key {key}: cannot parse {raw:?}: {e}"))
            }),
        }
    }
}

/// Comma-separated usize list ("1,3,4").
pub fn parse_usize_list(raw: &str) -> Result<Vec<usize>, CliError> {
    raw.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|e| CliError::Usage(format!("cannot parse {part:?} as an integer: {e}")))
        })
        .collect()
}
