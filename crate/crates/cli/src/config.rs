//! Layered configuration: built-in defaults, then an optional TOML or JSON
//! file, then command-line flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Recursively overlays `top` on `base`; objects merge key by key, every
/// other value replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config file {}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let v = if is_toml {
        let t: toml::Value = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        serde_json::to_value(t)?
    } else {
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
    };
    if !v.is_object() {
        bail!(usage(format!("{}: config must be a table/object", path.display())));
    }
    Ok(v)
}

/// `defaults < file < flags`.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&Path>,
    flags: Map<String, Value>,
) -> Result<T> {
    let mut v = serde_json::to_value(defaults)?;
    if let Some(p) = file {
        merge(&mut v, read_config_file(p)?);
    }
    merge(&mut v, Value::Object(flags));
    serde_json::from_value(v).map_err(|e| usage(format!("invalid configuration: {e}")).into())
}

/// Builder for the flag layer; `None` flags are skipped.
#[derive(Default)]
pub struct Flags(pub Map<String, Value>);

impl Flags {
    pub fn set<V: Serialize>(&mut self, path: &str, value: Option<V>) -> &mut Self {
        let Some(value) = value else { return self };
        let value = serde_json::to_value(value).expect("flag values serialize");
        let mut parts: Vec<&str> = path.split('.').collect();
        let last = parts.pop().expect("non-empty path");
        let mut obj = &mut self.0;
        for p in parts {
            obj = obj
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("nested flag path");
        }
        obj.insert(last.to_string(), value);
        self
    }

    pub fn take(&mut self) -> Map<String, Value> {
        std::mem::take(&mut self.0)
    }
}

/// Input or validation problem; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> UsageError {
    UsageError(msg.into())
}
