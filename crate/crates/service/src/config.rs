//! Line-oriented `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are option
//! names without the leading dashes; `_` and `-` are interchangeable.

use std::path::Path;

use crate::error::{Result, ServiceError};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub entries: Vec<(String, String)>,
}

impl ConfigFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ServiceError::BadRequest(format!("{origin}:{}: expected key=value, got {line:?}", n + 1)));
            };
            let key = k.trim().replace('_', "-");
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(ServiceError::BadRequest(format!("{origin}:{}: invalid key {:?}", n + 1, k.trim())));
            }
            if key == "config" {
                return Err(ServiceError::BadRequest(format!("{origin}:{}: config files cannot nest", n + 1)));
            }
            let value = v.trim().to_string();
            match entries.iter_mut().find(|(k, _)| *k == key) {
                Some(e) => e.1 = value,
                None => entries.push((key, value)),
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::BadRequest(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Entries as `--key value` arguments.
    pub fn to_args(&self) -> Vec<String> {
        self.entries
            .iter()
            .flat_map(|(k, v)| [format!("--{k}"), v.clone()])
            .collect()
    }
}
