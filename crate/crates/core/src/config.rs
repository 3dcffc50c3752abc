//! Plain-text `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Keys are unique.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "empty key".into(),
                });
            }
            if entries
                .insert(key.to_string(), (line_no, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, value)) => value.parse::<T>().map(Some).map_err(|_| Error::Parse {
                line: *line,
                message: format!("cannot parse value `{value}` for key `{key}`"),
            }),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Rejects keys outside `known`, naming the first offender.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for (key, (line, _)) in &self.entries {
            if !known.contains(&key.as_str()) {
                return Err(Error::Parse {
                    line: *line,
                    message: format!("unknown key `{key}`"),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let cfg = KvConfig::parse("# model\nnum_layers = 4\n\n top_k=2 # inline\n").unwrap();
        assert_eq!(cfg.get::<usize>("num_layers").unwrap(), Some(4));
        assert_eq!(cfg.get::<usize>("top_k").unwrap(), Some(2));
        assert_eq!(cfg.get::<usize>("missing").unwrap(), None);
    }

    #[test]
    fn reports_line_numbers() {
        let err = KvConfig::parse("a = 1\nbogus line\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = KvConfig::parse("a = 1\na = 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let cfg = KvConfig::parse("a = x\n").unwrap();
        assert!(matches!(cfg.get::<u32>("a"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn unknown_keys_rejected() {
        let cfg = KvConfig::parse("a = 1\nb = 2\n").unwrap();
        assert!(cfg.check_known(&["a", "b"]).is_ok());
        assert!(cfg.check_known(&["a"]).is_err());
    }
}
