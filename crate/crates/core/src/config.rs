//! Line-oriented `key=value` text, used for config files and for the config
//! snapshot stored in checkpoints.
//!
//! Blank lines and lines starting with `#` are ignored. Whitespace around keys
//! and values is trimmed. A repeated key keeps its last value.

use std::fmt::{self, Display};
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: IndexMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = IndexMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::format(
                    "key=value",
                    format!("line {}: missing '='", lineno + 1),
                ));
            };
            let key = key.trim();
            if key.is_empty()
                || !key
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
            {
                return Err(Error::format(
                    "key=value",
                    format!("line {}: invalid key '{key}'", lineno + 1),
                ));
            }
            entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(KeyValues { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Parses `key` if present.
    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Config(format!("cannot parse value '{v}' for key '{key}'")))
            })
            .transpose()
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parse_opt(key)?.unwrap_or(default))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Display for KeyValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let kv = KeyValues::parse("# header\n\n lr = 1e-5 \nbatch=4\nbatch=8\n").unwrap();
        assert_eq!(kv.get("lr"), Some("1e-5"));
        assert_eq!(kv.parse_or("batch", 0usize).unwrap(), 8);
        assert_eq!(kv.parse_or("missing", 3usize).unwrap(), 3);
        assert!(kv.parse_opt::<usize>("lr").is_err());
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KeyValues::parse("novalue\n").is_err());
        assert!(KeyValues::parse("=3\n").is_err());
        assert!(KeyValues::parse("bad key=3\n").is_err());
    }

    proptest! {
        #[test]
        fn display_round_trips(pairs in proptest::collection::vec(("[a-z_][a-z0-9_.-]{0,8}", "[ -~&&[^=#]]{0,12}"), 0..8)) {
            let mut kv = KeyValues::default();
            for (k, v) in &pairs {
                kv.set(k, v.trim());
            }
            prop_assert_eq!(KeyValues::parse(&kv.to_string()).unwrap(), kv);
        }
    }
}
