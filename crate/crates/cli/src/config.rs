//! `--config` files, usage errors and the per-directory `run.json` record.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Invalid invocation; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Values from the JSON file at `config`, overridden by every flag that was
/// given on the command line (non-null, non-false).
pub fn resolve<T: Serialize + DeserializeOwned>(cli: &T, config: Option<&Path>) -> Result<T> {
    let mut merged = match config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            match serde_json::from_str::<Value>(&text) {
                Ok(Value::Object(map)) => map,
                Ok(_) => return Err(usage(format!("config {} is not a JSON object", path.display()))),
                Err(e) => return Err(usage(format!("config {}: {e}", path.display()))),
            }
        }
        None => Map::new(),
    };
    if let Value::Object(flags) = serde_json::to_value(cli)? {
        for (k, v) in flags {
            if !(v.is_null() || v == Value::Bool(false)) {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("invalid config: {e}")))
}

/// Directory holding the outputs that sit next to `path`.
pub fn run_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Record `config` under `command` in `<dir>/run.json`, keeping entries of
/// other commands.
pub fn record_run(dir: &Path, command: &str, config: &impl Serialize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let path = dir.join("run.json");
    let mut runs = match fs::read_to_string(&path) {
        Ok(text) => match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(map)) => map,
            _ => Map::new(),
        },
        Err(_) => Map::new(),
    };
    runs.insert(command.to_string(), serde_json::to_value(config)?);
    fs::write(&path, serde_json::to_string_pretty(&Value::Object(runs))? + "\n")?;
    Ok(())
}

pub fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{s}`: {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, Debug, PartialEq)]
    struct Opts {
        epochs: Option<usize>,
        eta: Option<f32>,
        #[serde(default)]
        quiet: bool,
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"epochs": 7, "eta": 0.5, "quiet": true}"#).unwrap();
        let cli = Opts { epochs: Some(3), eta: None, quiet: false };
        let got = resolve(&cli, Some(&path)).unwrap();
        assert_eq!(got, Opts { epochs: Some(3), eta: Some(0.5), quiet: true });
        assert_eq!(resolve(&cli, None).unwrap(), cli);
    }

    #[test]
    fn sizes() {
        assert_eq!(parse_size("64").unwrap(), (64, 64));
        assert_eq!(parse_size("32x48").unwrap(), (32, 48));
        assert!(parse_size("a").is_err());
    }
}
