use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::assembly::{Convection, Scheme};
use crate::error::{Error, Result};

/// Flat `key = value` configuration with dotted section prefixes
/// (`ipcs.scheme = bdf2`). `#` starts a comment; blank lines are skipped.
#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Config {
        Config::default()
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Config> {
        let mut values = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse(
                    origin,
                    idx + 1,
                    format!("expected `key = value`, got `{line}`"),
                ));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::parse(origin, idx + 1, "empty key"));
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Config { values })
    }

    pub fn from_file(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text, path)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.values
            .insert(key.trim().to_string(), value.trim().to_string());
    }

    /// Apply a command-line style `key=value` override.
    pub fn set_pair(&mut self, kv: &str) -> Result<()> {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Error::Config(format!(
                "override `{kv}` is not of the form key=value"
            )));
        };
        if k.trim().is_empty() {
            return Err(Error::Config(format!("override `{kv}` has an empty key")));
        }
        self.set(k, v);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: `{v}` is not a number"))),
        }
    }

    pub fn usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: `{v}` is not a non-negative integer"))),
        }
    }

    pub fn string(&self, key: &str, default: &str) -> String {
        self.values
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string())
    }

    pub fn scheme(&self, key: &str, default: Scheme) -> Result<Scheme> {
        match self.values.get(key).map(|v| v.to_ascii_lowercase()) {
            None => Ok(default),
            Some(v) if v == "bdf2" => Ok(Scheme::Bdf2),
            Some(v) if v == "cn" => Ok(Scheme::Cn),
            Some(v) => Err(Error::Config(format!(
                "{key}: unknown scheme `{v}` (expected bdf2 or cn)"
            ))),
        }
    }

    pub fn convection(&self, key: &str, default: Convection) -> Result<Convection> {
        match self.values.get(key).map(|v| v.to_ascii_lowercase()) {
            None => Ok(default),
            Some(v) if v == "explicit" => Ok(Convection::Explicit),
            Some(v) if v == "implicit" => Ok(Convection::Implicit),
            Some(v) => Err(Error::Config(format!(
                "{key}: unknown convection treatment `{v}` (expected explicit or implicit)"
            ))),
        }
    }

    /// Reject any key outside `known`, listing the full accepted set.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for key in self.values.keys() {
            if !known.contains(&key.as_str()) {
                let mut list = known.to_vec();
                list.sort_unstable();
                return Err(Error::Config(format!(
                    "unknown key `{key}`; known keys: {}",
                    list.join(", ")
                )));
            }
        }
        Ok(())
    }
}
