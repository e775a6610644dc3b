//! Flat `key = value` configuration files. One assignment per line, `#`
//! starts a comment, keys may not repeat, and every key must be consumed —
//! unknown keys are an error, so typos fail loudly instead of silently
//! falling back to defaults.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};

pub fn parse_kv_str(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::parameter(format!(
                "line {}: expected 'key = value', got '{line}'",
                lineno + 1
            ))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::parameter(format!("line {}: empty key", lineno + 1)));
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::parameter(format!(
                "line {}: duplicate key '{key}'",
                lineno + 1
            )));
        }
    }
    Ok(map)
}

pub fn parse_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv_str(&text).map_err(|e| Error::parameter(format!("{}: {e}", path.display())))
}

/// Typed, consuming view over parsed keys. Call `finish()` after reading
/// everything; leftover keys are rejected by name.
pub struct KvReader {
    map: BTreeMap<String, String>,
    taken: BTreeSet<String>,
}

impl KvReader {
    pub fn new(map: BTreeMap<String, String>) -> Self {
        KvReader {
            map,
            taken: BTreeSet::new(),
        }
    }

    pub fn from_str(text: &str) -> Result<Self> {
        Ok(Self::new(parse_kv_str(text)?))
    }

    fn take_raw(&mut self, key: &str) -> Option<String> {
        let v = self.map.get(key).cloned();
        if v.is_some() {
            self.taken.insert(key.to_string());
        }
        v
    }

    pub fn take_string(&mut self, key: &str) -> Option<String> {
        self.take_raw(key)
    }

    pub fn take_f64(&mut self, key: &str) -> Result<Option<f64>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<f64>()
                .map(Some)
                .map_err(|_| Error::parameter(format!("key '{key}': '{v}' is not a number"))),
        }
    }

    pub fn take_usize(&mut self, key: &str) -> Result<Option<usize>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<usize>()
                .map(Some)
                .map_err(|_| Error::parameter(format!("key '{key}': '{v}' is not a non-negative integer"))),
        }
    }

    pub fn take_u64(&mut self, key: &str) -> Result<Option<u64>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<u64>()
                .map(Some)
                .map_err(|_| Error::parameter(format!("key '{key}': '{v}' is not a non-negative integer"))),
        }
    }

    pub fn take_bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.take_raw(key) {
            None => Ok(None),
            Some(v) => match v.as_str() {
                "true" | "1" | "yes" => Ok(Some(true)),
                "false" | "0" | "no" => Ok(Some(false)),
                _ => Err(Error::parameter(format!("key '{key}': '{v}' is not a boolean"))),
            },
        }
    }

    pub fn require_f64(&mut self, key: &str) -> Result<f64> {
        self.take_f64(key)?
            .ok_or_else(|| Error::parameter(format!("missing required key '{key}'")))
    }

    pub fn require_usize(&mut self, key: &str) -> Result<usize> {
        self.take_usize(key)?
            .ok_or_else(|| Error::parameter(format!("missing required key '{key}'")))
    }

    pub fn finish(self) -> Result<()> {
        let unknown: Vec<&String> =
            self.map.keys().filter(|k| !self.taken.contains(*k)).collect();
        if !unknown.is_empty() {
            let names: Vec<String> = unknown.iter().map(|k| format!("'{k}'")).collect();
            return Err(Error::parameter(format!(
                "unknown configuration keys: {}",
                names.join(", ")
            )));
        }
        Ok(())
    }
}
