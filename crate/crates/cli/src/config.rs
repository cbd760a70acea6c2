//! Flat key-value experiment configuration.
//!
//! The format is one `key = value` pair per line, `#` comments, no nesting
//! — dots in key names carry the grouping (`train.epochs`, `attack.pgd.steps`).
//! Parsing is strict: a key the experiment does not consume is an error,
//! because a typo like `train.epochz` silently running with defaults is the
//! worst possible failure mode for a reproducibility tool.

use std::collections::BTreeMap;
use std::path::Path;

use bvlab::{Error, Result};

/// Parsed configuration with consumption tracking.
#[derive(Debug, Clone)]
pub struct Config {
    entries: BTreeMap<String, String>,
    /// Keys read so far; anything never read is flagged by [`Config::finish`].
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl Config {
    /// Parses the flat `key = value` format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidConfig(format!(
                    "line {}: expected `key = value`, got \"{raw}\"",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "line {}: empty key",
                    lineno + 1
                )));
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "line {}: key \"{key}\" given twice",
                    lineno + 1
                )));
            }
        }
        Ok(Config {
            entries,
            used: Default::default(),
        })
    }

    /// Loads and parses a configuration file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Config::parse(&text)
    }

    fn raw(&self, key: &str) -> Option<&str> {
        let v = self.entries.get(key).map(String::as_str);
        if v.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        v
    }

    /// Inserts or replaces a value, for command-line overrides of file keys.
    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// String value, or the default when absent.
    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.raw(key).unwrap_or(default).to_string()
    }

    /// String value, or `None` when absent.
    pub fn get_opt_str(&self, key: &str) -> Option<String> {
        self.raw(key).map(str::to_string)
    }

    /// String value that must be present.
    pub fn require_str(&self, key: &str) -> Result<String> {
        self.raw(key)
            .map(str::to_string)
            .ok_or_else(|| Error::InvalidConfig(format!("missing required key \"{key}\"")))
    }

    fn parse_with<T, F>(&self, key: &str, what: &str, f: F) -> Result<Option<T>>
    where
        F: Fn(&str) -> Option<T>,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(s) => f(s).map(Some).ok_or_else(|| {
                Error::InvalidConfig(format!("key \"{key}\": \"{s}\" is not {what}"))
            }),
        }
    }

    /// Unsigned integer value, or the default when absent.
    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self
            .parse_with(key, "an unsigned integer", |s| s.parse().ok())?
            .unwrap_or(default))
    }

    /// Float value, or the default when absent.
    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self
            .parse_with(key, "a number", |s| {
                s.parse::<f64>().ok().filter(|v| v.is_finite())
            })?
            .unwrap_or(default))
    }

    /// Float value, or `None` when absent.
    pub fn get_opt_f64(&self, key: &str) -> Result<Option<f64>> {
        self.parse_with(key, "a number", |s| {
            s.parse::<f64>().ok().filter(|v| v.is_finite())
        })
    }

    /// Unsigned integer value, or `None` when absent.
    pub fn get_opt_usize(&self, key: &str) -> Result<Option<usize>> {
        self.parse_with(key, "an unsigned integer", |s| s.parse().ok())
    }

    /// Unsigned 64-bit value, or the default when absent.
    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self
            .parse_with(key, "an unsigned integer", |s| s.parse().ok())?
            .unwrap_or(default))
    }

    /// Boolean value (`true`/`false`), or the default when absent.
    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        Ok(self
            .parse_with(key, "true or false", |s| match s {
                "true" => Some(true),
                "false" => Some(false),
                _ => None,
            })?
            .unwrap_or(default))
    }

    /// Comma-separated list of floats, or the default when absent.
    pub fn get_f64_list(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .parse_with(key, "a comma-separated list of numbers", |s| {
                s.split(',')
                    .map(|p| p.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
                    .collect::<Option<Vec<_>>>()
            })?
            .unwrap_or_else(|| default.to_vec()))
    }

    /// Comma-separated list of unsigned 64-bit values, or the default.
    pub fn get_u64_list(&self, key: &str, default: &[u64]) -> Result<Vec<u64>> {
        Ok(self
            .parse_with(key, "a comma-separated list of unsigned integers", |s| {
                s.split(',')
                    .map(|p| p.trim().parse::<u64>().ok())
                    .collect::<Option<Vec<_>>>()
            })?
            .unwrap_or_else(|| default.to_vec()))
    }

    /// Comma-separated list of unsigned integers, or the default.
    pub fn get_usize_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        Ok(self
            .parse_with(key, "a comma-separated list of unsigned integers", |s| {
                s.split(',')
                    .map(|p| p.trim().parse::<usize>().ok())
                    .collect::<Option<Vec<_>>>()
            })?
            .unwrap_or_else(|| default.to_vec()))
    }

    /// Comma-separated list of strings, or the default.
    pub fn get_str_list(&self, key: &str, default: &[&str]) -> Vec<String> {
        match self.raw(key) {
            None => default.iter().map(|s| s.to_string()).collect(),
            Some(s) => s.split(',').map(|p| p.trim().to_string()).collect(),
        }
    }

    /// Errors on any key that was never consumed.
    ///
    /// Call once the experiment has read everything it understands.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&String> = self
            .entries
            .keys()
            .filter(|k| !used.contains(k.as_str()))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            let list: Vec<String> = unknown.iter().map(|k| format!("\"{k}\"")).collect();
            Err(Error::InvalidConfig(format!(
                "unknown configuration {}: {}",
                if list.len() == 1 { "key" } else { "keys" },
                list.join(", ")
            )))
        }
    }
}
