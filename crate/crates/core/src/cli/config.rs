//! Run configuration stored as JSON with flat dotted keys.
//!
//! ```json
//! { "train.epochs": 30, "model.dim": 32, "tracker.tau_high": 0.4 }
//! ```
//!
//! Keys missing from a file keep their defaults; unknown keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::priors::NoiseParams;
use crate::tensor::Precision;
use crate::tracker::TrackerConfig;
use crate::training::TrainConfig;

/// Synthetic dataset generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sequences: usize,
    pub frames: usize,
    pub expressions: usize,
    pub counterfactuals: usize,
    pub seed: u64,
    pub noise: NoiseParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sequences: 2,
            frames: 20,
            expressions: 10,
            counterfactuals: 2,
            seed: 42,
            noise: NoiseParams::default(),
        }
    }
}

/// Inference settings beyond the tracker thresholds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackOptions {
    pub precision: Precision,
    /// Restrict to one sequence id.
    pub sequence: Option<String>,
    /// Restrict to one expression id.
    pub expression: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    /// Worker threads for per-(sequence, expression) fan-out.
    pub jobs: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { jobs: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub track: TrackOptions,
    pub run: RunOptions,
    pub paths: Paths,
}

/// The network settings live under `train.model` in the struct and under
/// `model` in files.
const MODEL_INNER: &str = "train.model.";
const MODEL_OUTER: &str = "model.";

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, v) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&key, v, out);
            }
        }
        _ => {
            let key = match prefix.strip_prefix(MODEL_INNER) {
                Some(rest) => format!("{MODEL_OUTER}{rest}"),
                None => prefix.to_string(),
            };
            out.insert(key, v.clone());
        }
    }
}

fn insert_path(root: &mut Map<String, Value>, key: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|p| !p.is_empty()).ok_or_else(|| Error::Invalid(format!("empty config key `{key}`")))?;
    let mut node = root;
    for p in parts {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        node = entry
            .as_object_mut()
            .ok_or_else(|| Error::Invalid(format!("config key `{key}` nests under a value")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Every setting as `dotted.key -> value`, sorted by key.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut out = BTreeMap::new();
        flatten_into("", &v, &mut out);
        out
    }

    /// Pretty JSON object with one dotted key per setting.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_flat()).expect("config serializes");
        s.push('\n');
        s
    }

    /// Applies `key -> value` pairs over `self`. Unknown keys and
    /// ill-typed values are errors.
    pub fn apply(&self, pairs: &BTreeMap<String, Value>) -> Result<Self> {
        let known = self.to_flat();
        let mut merged = known.clone();
        for (k, v) in pairs {
            if !known.contains_key(k) {
                return Err(Error::Invalid(format!("unknown config key `{k}`")));
            }
            merged.insert(k.clone(), v.clone());
        }
        let mut root = Map::new();
        for (k, v) in merged {
            let key = match k.strip_prefix(MODEL_OUTER) {
                Some(rest) => format!("{MODEL_INNER}{rest}"),
                None => k,
            };
            insert_path(&mut root, &key, v)?;
        }
        serde_json::from_value(Value::Object(root)).map_err(|e| Error::Invalid(format!("config: {e}")))
    }

    /// Parses a flat JSON object over the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let pairs: BTreeMap<String, Value> =
            serde_json::from_str(text).map_err(|e| Error::Invalid(format!("config: {e}")))?;
        Self::default().apply(&pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Invalid(m) => Error::Invalid(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.noise.validate()?;
        let t = &self.tracker;
        if !(0.0 <= t.tau_low && t.tau_low <= t.tau_high && t.tau_high <= 1.0) {
            return Err(Error::Invalid(format!(
                "tracker thresholds need 0 <= tau_low <= tau_high <= 1, got {} and {}",
                t.tau_low, t.tau_high
            )));
        }
        if !(0.0..=1.0).contains(&t.iou_gate) || !(0.0..=1.0).contains(&t.epsilon) {
            return Err(Error::Invalid("tracker iou_gate and epsilon must lie in [0, 1]".into()));
        }
        if self.run.jobs == 0 {
            return Err(Error::Invalid("run.jobs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parses a `key=value` override. The value is read as JSON when it
/// parses, else taken as a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Invalid(format!("override `{s}` is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_flat_json() {
        let c = RunConfig::default();
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        let flat = c.to_flat();
        assert!(flat.contains_key("model.dim"));
        assert!(flat.contains_key("train.epochs"));
        assert!(flat.contains_key("tracker.kalman.std_position"));
        assert!(flat.keys().all(|k| !k.starts_with("train.model.")));
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_json(r#"{"train.epochs": 3, "model.dim": 16, "tracker.tau_high": 0.5}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.model.dim, 16);
        assert_eq!(c.tracker.tau_high, 0.5);
        assert_eq!(c.tracker.tau_low, 0.1);
        assert_eq!(c.train.lr, RunConfig::default().train.lr);
    }

    #[test]
    fn unknown_and_ill_typed_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"train.epoch": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train.epochs": "many"}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"epochs": 3}}"#).is_err());
        assert!(RunConfig::from_json("[1]").is_err());
    }

    #[test]
    fn optional_values_can_be_set_and_cleared() {
        let c = RunConfig::from_json(r#"{"train.grad_clip": 1.5, "paths.dataset": "data"}"#).unwrap();
        assert_eq!(c.train.grad_clip, Some(1.5));
        assert_eq!(c.paths.dataset, Some(PathBuf::from("data")));
        let c = c.apply(&[("train.grad_clip".to_string(), Value::Null)].into()).unwrap();
        assert_eq!(c.train.grad_clip, None);
    }

    #[test]
    fn overrides_parse_json_or_strings() {
        assert_eq!(parse_override("train.lr=1e-4").unwrap(), ("train.lr".into(), serde_json::json!(1e-4)));
        assert_eq!(parse_override("train.precision=f64").unwrap().1, Value::String("f64".into()));
        assert!(parse_override("nothing").is_err());
        let c = RunConfig::default()
            .apply(&[parse_override("train.precision=f64").unwrap()].into())
            .unwrap();
        assert_eq!(c.train.precision, Precision::F64);
    }

    #[test]
    fn validation_catches_bad_thresholds() {
        let mut c = RunConfig::default();
        c.validate().unwrap();
        c.tracker.tau_low = 0.5;
        assert!(c.validate().is_err());
    }
}
