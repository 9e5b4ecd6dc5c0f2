//! Flat `key=value` configuration files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Parsed `key=value` lines. `#` starts a comment; blank lines are ignored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
    used: std::cell::RefCell<BTreeSet<String>>,
}

impl KvConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: n + 1,
                    msg: "empty key".into(),
                });
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: n + 1,
                    msg: format!("duplicate key `{k}`"),
                });
            }
        }
        Ok(KvConfig {
            entries,
            used: Default::default(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> Self {
        KvConfig {
            entries: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            used: Default::default(),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self
            .raw(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))?;
        v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
    }

    /// Comma-separated list.
    pub fn list_or<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{s}`"))))
                .collect(),
        }
    }

    /// Errors on keys that no getter has asked for.
    pub fn reject_unknown(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .filter(|k| !used.contains(*k))
            .map(|k| k.as_str())
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }

    /// Keys under `prefix.`, with the prefix stripped. Marks them as used here.
    pub fn section(&self, prefix: &str) -> KvConfig {
        let dotted = format!("{prefix}.");
        let mut used = self.used.borrow_mut();
        let entries = self
            .entries
            .iter()
            .filter_map(|(k, v)| {
                let rest = k.strip_prefix(&dotted)?;
                used.insert(k.clone());
                Some((rest.to_string(), v.clone()))
            })
            .collect();
        KvConfig {
            entries,
            used: Default::default(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, key: &str, value: String) {
        self.entries.insert(key.to_string(), value);
    }
}

/// Sorted `key=value` lines.
pub fn canonical(entries: &[(&str, String)]) -> String {
    let mut sorted: Vec<_> = entries.to_vec();
    sorted.sort();
    sorted.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn config_hash(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_tracks_unknown_keys() {
        let c = KvConfig::parse("a = 1\n# note\nb=x,y # trailing\n", Path::new("t")).unwrap();
        assert_eq!(c.get_or("a", 0u32).unwrap(), 1);
        assert!(c.reject_unknown().is_err());
        assert_eq!(c.list_or::<String>("b", vec![]).unwrap(), vec!["x", "y"]);
        c.reject_unknown().unwrap();
    }

    #[test]
    fn reports_line_of_bad_input() {
        let e = KvConfig::parse("a=1\noops\n", Path::new("f.cfg")).unwrap_err();
        assert!(e.to_string().contains("2"), "{e}");
        assert!(KvConfig::parse("a=1\na=2\n", Path::new("f")).is_err());
    }

    #[test]
    fn canonical_text_is_sorted() {
        let t = canonical(&[("b", "2".into()), ("a", "1".into())]);
        assert_eq!(t, "a=1\nb=2\n");
        assert_eq!(config_hash(&t).len(), 16);
    }
}
