//! Line-oriented `key = value` configuration files.
//!
//! Keys are the field names of [`ExperimentConfig`] plus `output_dir`.
//! `#` starts a comment. Unknown keys, duplicate keys and unparsable values
//! are errors.

use std::path::{Path, PathBuf};

use serde_json::{Map, Number, Value};

use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;

pub const OUTPUT_DIR_KEY: &str = "output_dir";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_config(e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_config(e))))
    }

    /// Assign one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == OUTPUT_DIR_KEY {
            if value.is_empty() {
                return Err(Error::Config("output_dir must not be empty".into()));
            }
            self.output_dir = Some(PathBuf::from(value));
            return Ok(());
        }
        let mut map = match serde_json::to_value(&self.experiment)? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        let current = map
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown key '{key}'")))?;
        let parsed = parse_like(current, value)
            .ok_or_else(|| Error::Config(format!("invalid value '{value}' for key '{key}'")))?;
        map.insert(key.to_string(), parsed);
        self.experiment = serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::Config(format!("invalid value '{value}' for key '{key}': {e}")))?;
        Ok(())
    }

    /// Every key with its resolved value, sorted by key.
    pub fn render(&self) -> String {
        let map: Map<String, Value> = match serde_json::to_value(&self.experiment) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("config serializes to an object"),
        };
        let mut out = String::new();
        for (k, v) in &map {
            let text = match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {text}\n"));
        }
        if let Some(dir) = &self.output_dir {
            out.push_str(&format!("{OUTPUT_DIR_KEY} = {}\n", dir.display()));
        }
        out
    }

    /// All accepted keys.
    pub fn keys() -> Vec<String> {
        let mut keys: Vec<String> = match serde_json::to_value(ExperimentConfig::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => unreachable!("config serializes to an object"),
        };
        keys.push(OUTPUT_DIR_KEY.into());
        keys
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}

/// Parse `text` into a JSON value of the same kind as `like`.
fn parse_like(like: &Value, text: &str) -> Option<Value> {
    match like {
        Value::Bool(_) => text.parse::<bool>().ok().map(Value::Bool),
        Value::Number(n) if n.is_u64() => text.parse::<u64>().ok().map(Value::from),
        Value::Number(_) => text.parse::<f64>().ok().and_then(Number::from_f64).map(Value::Number),
        Value::String(_) => Some(Value::String(text.to_string())),
        _ => None,
    }
}
