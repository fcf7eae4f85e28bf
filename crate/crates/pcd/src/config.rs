//! Strict JSON configuration.
//!
//! Every key must be present unless the document sets `"defaults"`, in which
//! case the given keys are merged over a preset: `true` or `"desk"` for the
//! desk-scale defaults, `"full"` for the full-scale recipe. Unknown keys are
//! rejected everywhere.

use std::fs;
use std::path::Path;

use pcd_core::trainer::Config;
use serde_json::Value;

use crate::error::{io, Error, Result};

fn config_err(path: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        reason: reason.into(),
    }
}

pub fn preset(name: &str) -> Result<Config> {
    match name {
        "desk" => Ok(Config::desk()),
        "full" => Ok(Config::full_scale()),
        _ => Err(config_err("defaults", format!("unknown preset `{name}` (expected desk or full)"))),
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
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

pub fn parse_config_str(text: &str) -> Result<Config> {
    let value: Value = serde_json::from_str(text).map_err(|e| config_err("(root)", format!("invalid JSON: {e}")))?;
    let Value::Object(mut obj) = value else {
        return Err(config_err("(root)", "top level must be an object"));
    };
    let base = match obj.remove("defaults") {
        None | Some(Value::Bool(false)) => None,
        Some(Value::Bool(true)) => Some(Config::desk()),
        Some(Value::String(name)) => Some(preset(&name)?),
        Some(other) => return Err(config_err("defaults", format!("expected true, false, \"desk\" or \"full\", got {other}"))),
    };
    let doc = match base {
        Some(cfg) => {
            let mut v = serde_json::to_value(cfg).expect("config serializes");
            merge(&mut v, Value::Object(obj));
            v
        }
        None => Value::Object(obj),
    };
    let cfg: Config = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        config_err(if path == "." { "(root)".into() } else { path }, inner)
    })?;
    cfg.validate().map_err(|e| match e {
        pcd_core::Error::Config { path, reason } => Error::Config { path, reason },
        other => Error::Core(other),
    })?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Config> {
    let path = path.as_ref();
    parse_config_str(&fs::read_to_string(path).map_err(io(path))?)
}

/// Fully explicit, pretty-printed form; parses back to an equal config.
pub fn canonical_json(cfg: &Config) -> String {
    let mut s = serde_json::to_string_pretty(cfg).expect("config serializes");
    s.push('\n');
    s
}
