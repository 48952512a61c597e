//! Merging of command-line flags with an optional JSON config file.
//!
//! The file is a flat JSON object. Keys are long flag names (`steps`,
//! `learning-rate`, ...) of the command being run, plus the global `seed`
//! and `threads`. A flag given on the command line always wins over the
//! file; unknown keys are rejected.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::{Error, Result};

pub const GLOBAL_KEYS: [&str; 2] = ["seed", "threads"];

/// Parsed config file split into global and command keys.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub global: Map<String, Value>,
    pub command: Map<String, Value>,
}

impl ConfigFile {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
        let Value::Object(map) = value else {
            return Err(Error::Usage(format!("{}: config must be a JSON object", path.display())));
        };
        let mut out = ConfigFile::default();
        for (k, v) in map {
            if GLOBAL_KEYS.contains(&k.as_str()) {
                out.global.insert(k, v);
            } else {
                out.command.insert(k, v);
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(path, &text)
    }
}

fn is_unset(v: &Value) -> bool {
    matches!(v, Value::Null | Value::Bool(false))
}

/// Overlays the set fields of `flags` on `file`. Fields count as unset when
/// they are `None` or a `false` switch.
pub fn merge<T: Serialize + DeserializeOwned>(flags: &T, file: &Map<String, Value>, source: &Path) -> Result<T> {
    let Value::Object(flag_map) = serde_json::to_value(flags).map_err(|e| Error::Usage(e.to_string()))? else {
        unreachable!("command options serialize to objects");
    };
    for key in file.keys() {
        if !flag_map.contains_key(key) {
            let mut known: Vec<&str> = flag_map.keys().map(String::as_str).chain(GLOBAL_KEYS).collect();
            known.sort_unstable();
            return Err(Error::Usage(format!("{}: unknown key `{key}` (known: {})", source.display(), known.join(", "))));
        }
    }
    let mut merged = file.clone();
    for (k, v) in flag_map {
        if !is_unset(&v) || !merged.contains_key(&k) {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Usage(format!("{}: {e}", source.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(rename_all = "kebab-case")]
    struct Opts {
        steps: Option<usize>,
        learning_rate: Option<f64>,
        fast: bool,
    }

    fn file(text: &str) -> ConfigFile {
        ConfigFile::parse(Path::new("c.json"), text).unwrap()
    }

    #[test]
    fn flags_override_file() {
        let f = file(r#"{"steps": 5, "learning-rate": 0.1, "seed": 3}"#);
        assert_eq!(f.global["seed"], 3);
        let got = merge(&Opts { steps: Some(9), ..Default::default() }, &f.command, Path::new("c.json")).unwrap();
        assert_eq!(got, Opts { steps: Some(9), learning_rate: Some(0.1), fast: false });
    }

    #[test]
    fn file_switch_survives_absent_flag() {
        let f = file(r#"{"fast": true}"#);
        assert!(merge(&Opts::default(), &f.command, Path::new("c.json")).unwrap().fast);
    }

    #[test]
    fn unknown_keys_rejected() {
        let f = file(r#"{"stepz": 5}"#);
        let err = merge(&Opts::default(), &f.command, Path::new("c.json")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("stepz"));
    }

    #[test]
    fn wrong_types_rejected() {
        let f = file(r#"{"steps": "many"}"#);
        assert_eq!(merge(&Opts::default(), &f.command, Path::new("c.json")).unwrap_err().exit_code(), 2);
        assert!(ConfigFile::parse(Path::new("c.json"), "[1]").is_err());
    }
}
