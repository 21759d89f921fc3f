//! Flat key=value configuration files.
//!
//! One `key = value` pair per line, `#` starts a comment, later
//! assignments win. The CLI reads one of these first and applies its own
//! flags on top, so every flag has a file twin.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::TlocError;
use crate::Result;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn new() -> Config {
        Config::default()
    }

    pub fn parse_file(path: impl AsRef<Path>) -> Result<Config> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TlocError::io(path, e))?;
        Config::parse_str(&text, &path.display().to_string())
    }

    /// Parses config text; `origin` names the source in error messages.
    pub fn parse_str(text: &str, origin: &str) -> Result<Config> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(TlocError::parse(origin, i as u64 + 1, "expected key=value"));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(TlocError::parse(origin, i as u64 + 1, "empty key"));
            }
            values.insert(key.to_string(), value.trim().to_string());
        }
        Ok(Config { values })
    }

    /// Sets or overrides one value; this is how CLI flags take precedence.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Parses the value under `key`, or returns `default` when absent.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.values.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| {
                TlocError::InvalidConfig(format!("config key {key}: cannot parse {raw:?}"))
            }),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_comments_and_blanks() {
        let text = "# world\nseed = 7\n\nextent_x_m=1200.5\nname = a = b\n";
        let cfg = Config::parse_str(text, "test").unwrap();
        assert_eq!(cfg.get("seed"), Some("7"));
        assert_eq!(cfg.get_or("seed", 0u64).unwrap(), 7);
        assert_eq!(cfg.get_or("extent_x_m", 0.0).unwrap(), 1200.5);
        // Only the first '=' splits.
        assert_eq!(cfg.get("name"), Some("a = b"));
        assert_eq!(cfg.get("missing"), None);
        assert_eq!(cfg.get_or("missing", 3).unwrap(), 3);
    }

    #[test]
    fn later_assignments_and_cli_overrides_win() {
        let mut cfg = Config::parse_str("k = 1\nk = 2\n", "test").unwrap();
        assert_eq!(cfg.get("k"), Some("2"));
        cfg.set("k", "9");
        assert_eq!(cfg.get_or("k", 0i32).unwrap(), 9);
    }

    #[test]
    fn malformed_lines_are_errors_with_positions() {
        let err = Config::parse_str("seed 7\n", "inline").unwrap_err();
        assert!(matches!(err, TlocError::Parse { line: 1, .. }));
        let err = Config::parse_str("ok = 1\n = 2\n", "inline").unwrap_err();
        assert!(matches!(err, TlocError::Parse { line: 2, .. }));
        let err = Config::parse_str("n = x\n", "t").unwrap().get_or("n", 1u32).unwrap_err();
        assert!(matches!(err, TlocError::InvalidConfig(_)));
    }
}
