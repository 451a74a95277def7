//! JSON configuration files with dotted `key=value` overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

/// Sets `key` (dotted path into nested objects) to `raw`, parsed as JSON
/// when possible and as a string otherwise. Unknown keys are rejected.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("{key}: {} is not an object", parts[..i].join("."))))?;
        node = obj
            .get_mut(*part)
            .ok_or_else(|| Error::config(format!("unknown configuration key {key:?}")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Parses `key=value` pairs.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Default configuration, overlaid with an optional JSON file and then the
/// overrides, in order.
pub fn load<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut value = serde_json::to_value(T::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)?;
        let user: Value = serde_json::from_str(&text)?;
        merge(&mut value, user);
    }
    for o in overrides {
        let (k, v) = parse_assignment(o)?;
        apply_override(&mut value, &k, &v)?;
    }
    serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))
}

fn merge(base: &mut Value, top: Value) {
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
