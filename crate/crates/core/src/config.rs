//! `key = value` configuration files.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Keys must be known to the consumer; anything else is an error.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{k}`",
                    i + 1
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`"))),
        }
    }

    /// Comma separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad list item `{p}` for `{key}`")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Errors on the first key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Canonical text: sorted keys, one `key = value` per line.
    pub fn to_canonical(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let kv = KeyValues::parse("# header\nsteps = 5 # trailing\n\nname=x\n").unwrap();
        assert_eq!(kv.get::<usize>("steps").unwrap(), Some(5));
        assert_eq!(kv.get_str("name"), Some("x"));
        assert_eq!(kv.to_canonical(), "name = x\nsteps = 5\n");
    }

    #[test]
    fn rejects_garbage() {
        assert!(KeyValues::parse("novalue\n").is_err());
        assert!(KeyValues::parse("a = 1\na = 2\n").is_err());
        let kv = KeyValues::parse("a = 1\nb = 2").unwrap();
        assert!(kv.check_known(&["a"]).is_err());
        assert!(kv.get::<usize>("c").unwrap().is_none());
        let kv = KeyValues::parse("a = x").unwrap();
        assert!(kv.get::<usize>("a").is_err());
    }

    #[test]
    fn lists() {
        let kv = KeyValues::parse("d = 1, 1,2 ,1").unwrap();
        assert_eq!(kv.get_list::<usize>("d").unwrap(), Some(vec![1, 1, 2, 1]));
    }
}
