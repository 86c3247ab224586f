//! JSON config loading with dotted-path `--set` overrides.
//!
//! Every command starts from `{}` or the file passed via `--config`, applies
//! the overrides in order, and only then deserializes into its typed config,
//! so defaults, file values and flag values all resolve in one place.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::CliError;

pub fn load(path: Option<&Path>) -> Result<Value, CliError> {
    let Some(path) = path else {
        return Ok(Value::Object(Default::default()));
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::data(format!("bad JSON in {}: {e}", path.display())))?;
    if !value.is_object() {
        return Err(CliError::data(format!("config {} must be a JSON object", path.display())));
    }
    Ok(value)
}

/// Apply one `key.path=value` override. The value side is parsed as JSON when
/// it is valid JSON and treated as a bare string otherwise (so enum variants
/// need no extra quoting). Intermediate objects are created on demand; array
/// elements are addressed by index and must already exist.
pub fn apply_set(root: &mut Value, spec: &str) -> Result<(), CliError> {
    let Some((path, raw)) = spec.split_once('=') else {
        return Err(CliError::usage(format!("--set needs key=value, got '{spec}'")));
    };
    if path.is_empty() {
        return Err(CliError::usage(format!("--set has an empty key in '{spec}'")));
    }
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));

    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        if let Value::Array(items) = node {
            let idx: usize = segment.parse().map_err(|_| {
                CliError::usage(format!("'{segment}' in '{path}' must index an array"))
            })?;
            let len = items.len();
            let slot = items.get_mut(idx).ok_or_else(|| {
                CliError::usage(format!("index {idx} out of range (len {len}) in '{path}'"))
            })?;
            if last {
                *slot = value;
                return Ok(());
            }
            node = slot;
        } else if let Value::Object(map) = node {
            if last {
                map.insert(segment.to_string(), value);
                return Ok(());
            }
            node = map
                .entry(segment.to_string())
                .or_insert_with(|| Value::Object(Default::default()));
        } else {
            return Err(CliError::usage(format!(
                "'{path}' descends into a non-container at '{segment}'"
            )));
        }
    }
    unreachable!("loop returns on the last segment");
}

/// Load + override + deserialize in one step.
pub fn resolve<T: DeserializeOwned>(
    path: Option<&Path>,
    sets: &[String],
) -> Result<T, CliError> {
    let mut value = load(path)?;
    for spec in sets {
        apply_set(&mut value, spec)?;
    }
    serde_json::from_value(value).map_err(|e| CliError::data(format!("bad config: {e}")))
}
