//! Flat `key = value` text, used for run configs and fixture specs.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are
//! `[A-Za-z0-9_]+`; each key may appear once.

use std::collections::BTreeSet;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse(text: &str) -> Result<Vec<Entry>> {
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {line}: expected key = value")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::Format(format!("line {line}: invalid key {key:?}")));
        }
        if value.is_empty() {
            return Err(Error::Format(format!("line {line}: key {key:?} has no value")));
        }
        if !seen.insert(key.to_string()) {
            return Err(Error::Format(format!("line {line}: duplicate key {key:?}")));
        }
        entries.push(Entry {
            line,
            key: key.to_string(),
            value: value.to_string(),
        });
    }
    Ok(entries)
}

impl Entry {
    pub fn parse_value<T: FromStr>(&self) -> Result<T> {
        self.value.parse().map_err(|_| {
            Error::Format(format!(
                "line {}: invalid value {:?} for key {:?}",
                self.line, self.value, self.key
            ))
        })
    }

    /// Finite `f64`; rejects `nan`/`inf` spellings.
    pub fn parse_f64(&self) -> Result<f64> {
        let v: f64 = self.parse_value()?;
        if !v.is_finite() {
            return Err(Error::Format(format!(
                "line {}: value for {:?} must be finite",
                self.line, self.key
            )));
        }
        Ok(v)
    }

    pub fn unknown(&self) -> Error {
        Error::Format(format!("line {}: unknown key {:?}", self.line, self.key))
    }
}
