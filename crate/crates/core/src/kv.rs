//! Plain-text `key = value` files.
//!
//! One entry per line, `#` starts a comment, blank lines are ignored. Keys may
//! carry a dotted section prefix (`backbone.steps`). Consumers take the keys
//! they understand and then call [`KeyValues::finish`], which rejects anything
//! left over.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
    /// Section this view was taken from, used in error messages.
    prefix: String,
}

impl KeyValues {
    fn full_key(&self, key: &str) -> String {
        format!("{}{key}", self.prefix)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key = value, got '{line}'",
                    n + 1
                ))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries
                .insert(key.to_string(), value.trim().to_string())
                .is_some()
            {
                return Err(Error::Config(format!(
                    "line {}: duplicate key '{key}'",
                    n + 1
                )));
            }
        }
        Ok(Self {
            entries,
            prefix: String::new(),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn take_parsed<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| {
                Error::Config(format!(
                    "invalid value '{v}' for key '{}'",
                    self.full_key(key)
                ))
            }),
        }
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T> {
        self.take_parsed(key)?
            .ok_or_else(|| Error::Config(format!("missing required key '{}'", self.full_key(key))))
    }

    /// Removes every `prefix.*` entry and returns them with the prefix stripped.
    pub fn take_section(&mut self, prefix: &str) -> KeyValues {
        let dotted = format!("{prefix}.");
        let keys: Vec<String> = self
            .entries
            .keys()
            .filter(|k| k.starts_with(&dotted))
            .cloned()
            .collect();
        let mut section = KeyValues {
            entries: BTreeMap::new(),
            prefix: format!("{}{dotted}", self.prefix),
        };
        for k in keys {
            let v = self.entries.remove(&k).unwrap();
            section.entries.insert(k[dotted.len()..].to_string(), v);
        }
        section
    }

    /// Fails on any key that no consumer took.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            return Ok(());
        }
        let keys: Vec<String> = self.entries.keys().map(|k| self.full_key(k)).collect();
        Err(Error::Config(format!(
            "unknown key(s): {}",
            keys.join(", ")
        )))
    }

    pub fn into_map(self) -> BTreeMap<String, String> {
        self.entries
    }

    /// Canonical `key = value` rendering, sorted by key.
    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Parses `HxW` (e.g. `64x64`) into `(height, width)`.
pub fn parse_size(s: &str) -> Option<(usize, usize)> {
    let (h, w) = s.split_once(['x', 'X'])?;
    Some((h.trim().parse().ok()?, w.trim().parse().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_sections() {
        let mut kv =
            KeyValues::parse("# header\nseed = 7\n\nbackbone.steps=10 # trailing\n").unwrap();
        let mut bb = kv.take_section("backbone");
        assert_eq!(bb.require::<usize>("steps").unwrap(), 10);
        bb.finish().unwrap();
        assert_eq!(kv.require::<u64>("seed").unwrap(), 7);
        kv.finish().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let kv = KeyValues::parse("bogus = 1").unwrap();
        let err = kv.finish().unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        let mut kv = KeyValues::parse("synth.extra = 1\nsynth.seed = 2").unwrap();
        let mut synth = kv.take_section("synth");
        synth.take("seed");
        let err = synth.finish().unwrap_err().to_string();
        assert!(err.contains("synth.extra"), "{err}");
    }

    #[test]
    fn missing_key_is_named() {
        let mut kv = KeyValues::default();
        let err = kv.require::<u32>("train_count").unwrap_err().to_string();
        assert!(err.contains("train_count"), "{err}");
        let mut section = KeyValues::parse("x = 1").unwrap().take_section("synth");
        let err = section
            .require::<u32>("train_count")
            .unwrap_err()
            .to_string();
        assert!(err.contains("'synth.train_count'"), "{err}");
    }

    #[test]
    fn malformed_lines() {
        assert!(KeyValues::parse("novalue").is_err());
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        assert!(KeyValues::parse(" = 2").is_err());
    }

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("64x48"), Some((64, 48)));
        assert_eq!(parse_size("64"), None);
    }
}
