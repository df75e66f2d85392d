//! Flat key/value configuration with `[section]` headers. Command-line
//! flags override file values.

use std::collections::BTreeMap;

#[derive(Debug, Default, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    /// Parse `[section]` + `key = value` text; keys are stored as
    /// `section.key` (bare keys go into the section named by `default`).
    pub fn parse(text: &str, default: &str) -> Result<Config, String> {
        let mut section = default.to_string();
        let mut values = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", no + 1))?;
            values.insert(format!("{section}.{}", k.trim()), v.trim().to_string());
        }
        Ok(Config { values })
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn get_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get(key).unwrap_or(default)
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize, String> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| format!("bad integer for {key}: {v}")),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64, String> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| format!("bad number for {key}: {v}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_overrides() {
        let mut c = Config::parse("[run]\npreset = resnet20\nseed = 7\n", "run").unwrap();
        assert_eq!(c.get("run.preset"), Some("resnet20"));
        assert_eq!(c.get_usize("run.seed", 0).unwrap(), 7);
        c.set("run.preset", "resnet18");
        assert_eq!(c.get("run.preset"), Some("resnet18"));
        assert!(Config::parse("nonsense\n", "run").is_err());
    }
}
