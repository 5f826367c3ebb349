//! Flat dotted-key configuration layered over the toy pipeline defaults.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{Map, Value};
use stemsim::experiment::PipelineConfig;

use crate::CliError;

/// Leaves of a JSON object keyed by their dotted path. Arrays are leaves.
pub fn flatten(v: &Value) -> BTreeMap<String, Value> {
    fn go(v: &Value, prefix: &str, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(m) if !m.is_empty() => {
                for (k, x) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    go(x, &key, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    go(v, "", &mut out);
    out
}

pub fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("prefix keys hold objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

/// The effective configuration and its flat form.
#[derive(Debug, Clone)]
pub struct CliConfig {
    pub pipeline: PipelineConfig,
    pub flat: BTreeMap<String, Value>,
}

impl CliConfig {
    pub fn to_json(&self) -> Value {
        Value::Object(self.flat.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
    }
}

/// Parses `value` as JSON, falling back to a plain string.
pub fn parse_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

/// Defaults, then the config file, then `--set key=value` pairs, then flag overrides.
pub fn load(file: Option<&Path>, sets: &[String], overrides: &[(&str, Value)]) -> Result<CliConfig, CliError> {
    let defaults = serde_json::to_value(PipelineConfig::toy()).expect("config serializes");
    let mut flat = flatten(&defaults);
    let mut apply = |key: &str, v: Value, origin: &str| -> Result<(), CliError> {
        match flat.get_mut(key) {
            Some(slot) => {
                *slot = v;
                Ok(())
            }
            None => Err(CliError::Usage(format!("unknown config key {key:?} ({origin})"))),
        }
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        if !v.is_object() {
            return Err(CliError::Usage(format!("config {} must be a JSON object", path.display())));
        }
        for (k, x) in flatten(&v) {
            apply(&k, x, "config file")?;
        }
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {s:?}")))?;
        apply(k.trim(), parse_value(v.trim()), "--set")?;
    }
    for (k, v) in overrides {
        apply(k, v.clone(), "flag")?;
    }
    let pipeline: PipelineConfig = serde_json::from_value(unflatten(&flat))
        .map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
    pipeline.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(CliConfig { pipeline, flat })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_round_trips_the_defaults() {
        let v = serde_json::to_value(PipelineConfig::toy()).unwrap();
        assert_eq!(unflatten(&flatten(&v)), v);
    }

    #[test]
    fn overrides_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"train.lambda": 0.3, "train.margin": 0.5}"#).unwrap();
        let c = load(Some(&f), &["train.lambda=0.2".into()], &[("train.margin", serde_json::json!(0.1))]).unwrap();
        assert_eq!(c.pipeline.train.lambda, 0.2);
        assert_eq!(c.pipeline.train.margin, 0.1);
    }

    #[test]
    fn unknown_and_ill_typed_keys_are_usage_errors() {
        assert!(matches!(load(None, &["train.lamda=0.1".into()], &[]), Err(CliError::Usage(_))));
        assert!(matches!(load(None, &["train.epochs=\"many\"".into()], &[]), Err(CliError::Usage(_))));
    }
}
