//! Run configuration: one JSON document covering training, model, loss, and
//! phantom-data settings. Every field is overridable from the command line
//! by its dotted path (`--model.offset.strategy squash_scaled`); unknown
//! keys are rejected rather than ignored.

use nearquery_core::loss::LossWeights;
use nearquery_core::model::ModelConfig;
use nearquery_core::phantom::PhantomSpec;
use nearquery_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eval_interval: usize,
    pub preprocess_trick: bool,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub phantom: PhantomSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            seed: t.seed,
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eval_interval: t.eval_interval,
            preprocess_trick: t.preprocess_trick,
            model: t.model,
            weights: t.weights,
            phantom: PhantomSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eval_interval: self.eval_interval,
            seed: self.seed,
            preprocess_trick: self.preprocess_trick,
            model: self.model.clone(),
            weights: self.weights,
        }
    }
}

#[derive(Debug)]
pub enum ConfigError {
    /// Key path not present in the schema (exit code 2: unknown flag).
    UnknownKey(String),
    /// Structurally valid key with an invalid value (exit code 1).
    Invalid(String),
}

/// Set `path` (dot-separated) in a JSON tree. The path must already exist in
/// the tree (all config fields serialize by default, so the default tree is
/// the schema).
fn set_path(tree: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<(), ConfigError> {
    let mut node = tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| ConfigError::UnknownKey(path.to_string()))?;
        if !obj.contains_key(*part) {
            return Err(ConfigError::UnknownKey(path.to_string()));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked contains_key");
    }
    Err(ConfigError::UnknownKey(path.to_string()))
}

/// Parse an override value: JSON when it parses, bare string otherwise.
fn parse_value(raw: &str) -> serde_json::Value {
    serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()))
}

/// Build the effective config: defaults, then an optional config file, then
/// dotted-path overrides, then strict deserialization.
pub fn resolve(
    config_file: Option<&str>,
    overrides: &[(String, String)],
) -> Result<RunConfig, ConfigError> {
    let mut tree = serde_json::to_value(RunConfig::default()).expect("default serializes");
    if let Some(path) = config_file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Invalid(format!("config {path}: {e}")))?;
        let file_tree: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(format!("config {path}: {e}")))?;
        merge(&mut tree, &file_tree, "")?;
    }
    for (key, raw) in overrides {
        set_path(&mut tree, key, parse_value(raw))?;
    }
    serde_json::from_value(tree).map_err(|e| {
        let msg = e.to_string();
        if msg.contains("unknown field") {
            ConfigError::UnknownKey(msg)
        } else {
            ConfigError::Invalid(msg)
        }
    })
}

/// Overlay `src` onto `dst`, rejecting keys absent from the schema tree.
fn merge(dst: &mut serde_json::Value, src: &serde_json::Value, at: &str) -> Result<(), ConfigError> {
    match src {
        serde_json::Value::Object(entries) => {
            for (k, v) in entries {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                let obj = dst
                    .as_object_mut()
                    .ok_or_else(|| ConfigError::UnknownKey(path.clone()))?;
                if !obj.contains_key(k) {
                    return Err(ConfigError::UnknownKey(path));
                }
                let slot = obj.get_mut(k).expect("checked");
                if v.is_object() && slot.is_object() {
                    merge(slot, v, &path)?;
                } else {
                    *slot = v.clone();
                }
            }
            Ok(())
        }
        _ => Err(ConfigError::Invalid("config file must be a JSON object".into())),
    }
}

pub fn to_pretty_json(cfg: &RunConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = resolve(
            None,
            &[
                ("model.offset.strategy".into(), "squash_scaled".into()),
                ("model.d_model".into(), "32".into()),
                ("phantom.count".into(), "4".into()),
                ("lr".into(), "0.005".into()),
                ("preprocess_trick".into(), "false".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.phantom.count, 4);
        assert_eq!(cfg.lr, 0.005);
        assert!(!cfg.preprocess_trick);
        assert!(matches!(
            cfg.model.offset.strategy,
            nearquery_core::deform::OffsetStrategy::SquashScaled
        ));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            resolve(None, &[("model.bogus".into(), "1".into())]),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            resolve(None, &[("nope".into(), "1".into())]),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn bad_values_are_validation_errors() {
        assert!(matches!(
            resolve(None, &[("steps".into(), "\"many\"".into())]),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn resolved_json_round_trips() {
        let cfg = resolve(None, &[("model.n_queries".into(), "12".into())]).unwrap();
        let text = to_pretty_json(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, &text).unwrap();
        let again = resolve(Some(path.to_str().unwrap()), &[]).unwrap();
        assert_eq!(to_pretty_json(&again), text);
    }
}
