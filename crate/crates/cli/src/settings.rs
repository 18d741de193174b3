//! Resolution of tunables: command-line flag, then the JSON config file, then
//! the built-in default.
//!
//! The config file is a JSON object. A key may sit at the top level or inside
//! an object named after the subcommand; the subcommand section wins. Keys
//! use the flag spelling with either `-` or `_`.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::CliError;

pub struct Settings {
    root: Map<String, Value>,
    section: Option<Map<String, Value>>,
}

impl Settings {
    pub fn load(path: Option<&Path>, subcommand: &str) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self {
                root: Map::new(),
                section: None,
            });
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let Value::Object(root) = value else {
            return Err(CliError::Config(format!(
                "{}: expected a JSON object",
                path.display()
            )));
        };
        let section = match root.get(subcommand) {
            Some(Value::Object(map)) => Some(map.clone()),
            _ => None,
        };
        Ok(Self { root, section })
    }

    fn lookup(&self, key: &str) -> Option<&Value> {
        self.section
            .as_ref()
            .and_then(|s| find(s, key))
            .or_else(|| find(&self.root, key))
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.lookup(key)
            .map(|v| {
                serde_json::from_value(v.clone())
                    .map_err(|e| CliError::Config(format!("key `{key}`: {e}")))
            })
            .transpose()
    }

    /// Flag value if given, else the config entry, else `default`.
    pub fn pick<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError> {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }

    /// Like [`Settings::pick`] but with no default: a missing value is a usage error.
    pub fn require<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<T, CliError> {
        match flag {
            Some(v) => Ok(v),
            None => self
                .get(key)?
                .ok_or_else(|| CliError::Usage(format!("--{} is required", key.replace('_', "-")))),
        }
    }
}

fn find<'a>(map: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    map.get(&key.replace('-', "_"))
        .or_else(|| map.get(&key.replace('_', "-")))
}
