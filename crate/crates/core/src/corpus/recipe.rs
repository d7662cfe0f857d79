//! Flat `key = value` configuration files.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use super::{CorpusError, Result};

/// Parsed recipe. Blank lines and `#` comments are ignored; later keys
/// override earlier ones.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Recipe {
    values: BTreeMap<String, String>,
}

impl Recipe {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CorpusError::Parse {
                line: n + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(CorpusError::Parse {
                    line: n + 1,
                    msg: "empty key".into(),
                });
            }
            values.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.values.insert(key.into(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get_str(key)
            .ok_or_else(|| CorpusError::Config(format!("recipe lacks {key}")))
    }

    /// Typed value of `key`, if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get_str(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| CorpusError::Config(format!("bad value {v:?} for {key}")))
            })
            .transpose()
    }

    /// Overwrites `slot` when `key` is present.
    pub fn apply<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
