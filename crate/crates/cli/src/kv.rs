//! The one config grammar every file uses: `key = value` lines, `#` comments
//! (whole-line or trailing), blank lines ignored. Keys are lowercase with
//! dots and underscores; values are trimmed verbatim. Duplicate keys and
//! keys nobody consumed are errors, so typos fail loudly instead of
//! silently running defaults.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use shardjoin_core::{Error, Result};

#[derive(Debug)]
pub struct KvFile {
    origin: String,
    pairs: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl KvFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.split_once('#') {
                Some((before, _)) => before,
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{origin}:{}: expected `key = value`, got `{}`",
                    lineno + 1,
                    raw.trim()
                ))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("{origin}:{}: empty key", lineno + 1)));
            }
            if pairs.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!(
                    "{origin}:{}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
        }
        Ok(KvFile { origin: origin.to_string(), pairs, used: RefCell::new(BTreeSet::new()) })
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        let v = self.pairs.get(key).map(|s| s.as_str());
        if v.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        v
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("{}: missing required key `{key}`", self.origin)))
    }

    fn parse_with<T, F: Fn(&str) -> Option<T>>(&self, key: &str, what: &str, f: F) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => f(raw).map(Some).ok_or_else(|| {
                Error::Config(format!("{}: key `{key}`: `{raw}` is not {what}", self.origin))
            }),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        Ok(self.parse_with(key, "an unsigned integer", |s| s.parse().ok())?.unwrap_or(default))
    }

    pub fn u64_opt(&self, key: &str) -> Result<Option<u64>> {
        self.parse_with(key, "an unsigned integer", |s| s.parse().ok())
    }

    pub fn u32_or(&self, key: &str, default: u32) -> Result<u32> {
        Ok(self.parse_with(key, "an unsigned integer", |s| s.parse().ok())?.unwrap_or(default))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.parse_with(key, "an unsigned integer", |s| s.parse().ok())?.unwrap_or(default))
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    /// Comma-separated list; empty value means empty list.
    pub fn list(&self, key: &str) -> Option<Vec<String>> {
        self.get(key).map(|raw| {
            raw.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
        })
    }

    pub fn err(&self, key: &str, msg: &str) -> Error {
        Error::Config(format!("{}: key `{key}`: {msg}", self.origin))
    }

    /// Every key must have been consumed by now; anything left over is a
    /// typo or a key from the wrong file kind.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> =
            self.pairs.keys().map(|k| k.as_str()).filter(|k| !used.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("{}: unknown key(s): {}", self.origin, unknown.join(", "))))
        }
    }
}
