//! Flat `key = value` text files shared by run configs, model sidecars and
//! landmark schemas. `#` starts a comment; blank lines are ignored.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("`{key}` = `{v}`: {e}")))
            })
            .transpose()
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    /// Whitespace-separated index list.
    pub fn indices(&self, key: &str) -> Result<Option<Vec<usize>>> {
        self.raw(key)
            .map(|v| {
                v.split_whitespace()
                    .map(|t| {
                        t.parse::<usize>()
                            .map_err(|e| Error::Config(format!("`{key}`: bad index `{t}`: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }

    /// Fails on any key not accepted by `allowed`.
    pub fn reject_unknown(&self, allowed: impl Fn(&str) -> bool) -> Result<()> {
        let unknown: Vec<_> = self.keys().filter(|k| !allowed(k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }

    pub fn to_text(&self, header: &str) -> String {
        let mut s = String::new();
        for line in header.lines() {
            s.push_str("# ");
            s.push_str(line);
            s.push('\n');
        }
        for (k, v) in &self.entries {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

pub fn join_indices(idx: &[usize]) -> String {
    idx.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_lists() {
        let c = FlatConfig::parse("# head\n a = 3 # trailing\n\nlist = 1 2  3\n").unwrap();
        assert_eq!(c.require::<u32>("a").unwrap(), 3);
        assert_eq!(c.indices("list").unwrap().unwrap(), vec![1, 2, 3]);
        assert!(c.get::<u32>("missing").unwrap().is_none());
        assert!(c.require::<u32>("missing").is_err());
    }

    #[test]
    fn rejects_malformed_duplicate_and_unknown() {
        assert!(FlatConfig::parse("novalue\n").is_err());
        assert!(FlatConfig::parse("a = 1\na = 2\n").is_err());
        assert!(FlatConfig::parse(" = 2\n").is_err());
        let c = FlatConfig::parse("a = 1\nb = 2\n").unwrap();
        assert!(c.reject_unknown(|k| k == "a").is_err());
        assert!(c.reject_unknown(|k| k == "a" || k == "b").is_ok());
        assert!(c.get::<u32>("a").is_ok());
        let bad = FlatConfig::parse("a = x\n").unwrap();
        assert!(bad.get::<u32>("a").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = FlatConfig::new();
        c.set("depth", 3);
        c.set("lr", 0.001);
        assert_eq!(FlatConfig::parse(&c.to_text("model")).unwrap(), c);
    }
}
