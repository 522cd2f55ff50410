//! Run configuration: an optional JSON file overlaid with command-line flags.

use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

/// Bad or missing arguments; maps to exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Merges `flags` over the JSON object in `file`. Flags that were not given
/// serialize as null and leave the file value in place.
pub fn merge<T: Serialize + DeserializeOwned>(flags: &T, file: Option<&Path>) -> Result<(T, Value)> {
    let mut base = match file {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str::<Value>(&text).map_err(|e| usage(format!("config {} is not valid JSON: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    let Value::Object(obj) = &mut base else {
        return Err(usage("config file must hold a JSON object"));
    };
    if let Value::Object(over) = serde_json::to_value(flags)? {
        for (k, v) in over {
            if !v.is_null() {
                obj.insert(k, v);
            }
        }
    }
    let merged = serde_json::from_value(base.clone()).map_err(|e| usage(format!("invalid configuration: {e}")))?;
    Ok((merged, base))
}

/// Hex SHA-256 of the compact JSON form. Object keys serialize sorted, so
/// equal configs hash equal whatever order they were written in.
pub fn config_hash(config: &Value) -> String {
    let digest = Sha256::digest(config.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn require<T: Clone>(value: &Option<T>, flag: &str) -> Result<T> {
    value.clone().ok_or_else(|| usage(format!("missing required argument --{flag}")))
}
