//! Experiment configuration: nested blocks with strict (unknown-key
//! rejecting) parsing from either a flat dotted-key file or JSON.
//!
//! The flat format is line-oriented and diff-friendly:
//! ```text
//! # comment
//! trainer.batch_size = 32
//! contrast.loss_weights = [0.1, 0.4, 0.7, 1.0]
//! model.arch = toy-cnn
//! ```
//! Values are JSON literals; bare words parse as strings. Every key left
//! out takes its documented default, and [`emit_flat`] materializes the
//! effective config for the run directory.

use crate::augment::AugmentConfig;
use crate::contrast::{LossWeights, Temperatures};
use crate::data::ToySpec;
use crate::error::{DetcoError, Result};
use crate::eval::ProbeConfig;
use crate::model::EncoderConfig;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    /// Capacity K of each of the eight queues.
    pub queue_capacity: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            queue_capacity: 4096,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queue_capacity == 0 {
            return Err(DetcoError::Config(
                "memory.queue_capacity must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastConfig {
    pub tau_gg: f64,
    pub tau_ll: f64,
    pub tau_gl: f64,
    pub loss_weights: LossWeights,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        let t = Temperatures::default();
        ContrastConfig {
            tau_gg: t.tau_gg,
            tau_ll: t.tau_ll,
            tau_gl: t.tau_gl,
            loss_weights: LossWeights::default(),
        }
    }
}

impl ContrastConfig {
    pub fn temperatures(&self) -> Temperatures {
        Temperatures {
            tau_gg: self.tau_gg,
            tau_ll: self.tau_ll,
            tau_gl: self.tau_gl,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.temperatures().validate()?;
        self.loss_weights.validate()
    }
}

/// All knobs of a run, one block per subsystem.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: SchemaVersion,
    pub augment: AugmentConfig,
    pub model: EncoderConfig,
    pub memory: MemoryConfig,
    pub contrast: ContrastConfig,
    pub trainer: TrainConfig,
    pub data: ToySpec,
    pub eval: ProbeConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SchemaVersion(pub u32);

impl Default for SchemaVersion {
    fn default() -> Self {
        SchemaVersion(1)
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version.0 != 1 {
            return Err(DetcoError::Config(format!(
                "schema_version {} is not supported (expected 1)",
                self.schema_version.0
            )));
        }
        self.augment.validate()?;
        self.model.validate()?;
        self.memory.validate()?;
        self.contrast.validate()?;
        self.trainer.validate()?;
        self.data.validate()?;
        self.eval.validate()?;

        let stride = self.model.max_stride();
        if self.augment.global_side % stride != 0 {
            return Err(DetcoError::Config(format!(
                "augment.global_side ({}) must be divisible by the maximum stage stride ({stride})",
                self.augment.global_side
            )));
        }
        if self.trainer.glc_enabled && self.augment.patch_side % stride != 0 {
            return Err(DetcoError::Config(format!(
                "augment.patch_side ({}) must be divisible by the maximum stage stride ({stride}) \
                 while glc is enabled",
                self.augment.patch_side
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Flat-key parsing
// ---------------------------------------------------------------------------

fn flatten_paths(value: &Value, prefix: &str, out: &mut Vec<String>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_paths(v, &path, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn flatten_leaves(value: &Value, prefix: &str, out: &mut Vec<(String, Value)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_leaves(v, &path, out);
            }
        }
        _ => out.push((prefix.to_string(), value.clone())),
    }
}

fn set_path(root: &mut Value, path: &str, v: Value) {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cur
            .as_object_mut()
            .expect("config tree nodes are objects");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), v);
            return;
        }
        cur = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
}

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut cur = vec![i + 1];
        for (j, cb) in b.iter().enumerate() {
            let cost = if ca == cb { 0 } else { 1 };
            cur.push((prev[j + 1] + 1).min(cur[j] + 1).min(prev[j] + cost));
        }
        prev = cur;
    }
    prev[b.len()]
}

fn known_keys() -> Vec<String> {
    let defaults = serde_json::to_value(ExperimentConfig::default()).expect("serializable");
    let mut keys = Vec::new();
    flatten_paths(&defaults, "", &mut keys);
    keys
}

fn reject_unknown(key: &str, known: &[String]) -> DetcoError {
    let suggestion = known
        .iter()
        .map(|k| (levenshtein(key, k), k))
        .min_by_key(|(d, _)| *d)
        .filter(|(d, _)| *d <= 3)
        .map(|(_, k)| format!("; did you mean `{k}`?"))
        .unwrap_or_default();
    DetcoError::Config(format!("unknown config key `{key}`{suggestion}"))
}

/// Apply `(key, value)` overlays onto the default config tree, rejecting
/// unknown keys (with a did-you-mean hint) and naming the offending key on
/// type mismatches.
fn build_from_overlays(overlays: Vec<(String, Value)>) -> Result<ExperimentConfig> {
    let known = known_keys();
    let mut tree = serde_json::to_value(ExperimentConfig::default()).expect("serializable");
    for (key, _) in &overlays {
        if !known.contains(key) {
            return Err(reject_unknown(key, &known));
        }
    }
    for (key, value) in &overlays {
        set_path(&mut tree, key, value.clone());
    }
    match serde_json::from_value::<ExperimentConfig>(tree) {
        Ok(cfg) => Ok(cfg),
        Err(outer) => {
            // find the key that broke deserialization for a precise message
            for (key, value) in &overlays {
                let mut probe = serde_json::to_value(ExperimentConfig::default()).unwrap();
                set_path(&mut probe, key, value.clone());
                if let Err(e) = serde_json::from_value::<ExperimentConfig>(probe) {
                    return Err(DetcoError::Config(format!(
                        "config key `{key}`: {e} (received {value})"
                    )));
                }
            }
            Err(DetcoError::Config(format!("config rejected: {outer}")))
        }
    }
}

/// Parse the flat dotted-key format.
pub fn parse_flat_str(text: &str) -> Result<ExperimentConfig> {
    let mut overlays = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            DetcoError::Config(format!(
                "line {}: expected `key = value`, got `{raw}`",
                lineno + 1
            ))
        })?;
        let key = key.trim().to_string();
        let raw_value = value.trim();
        // JSON literal first; bare words fall back to strings
        let value = serde_json::from_str::<Value>(raw_value)
            .unwrap_or_else(|_| Value::String(raw_value.to_string()));
        overlays.push((key, value));
    }
    build_from_overlays(overlays)
}

/// Parse the JSON alternative (nested objects mirroring the blocks).
pub fn parse_json_str(text: &str) -> Result<ExperimentConfig> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| DetcoError::Config(format!("invalid JSON config: {e}")))?;
    let mut overlays = Vec::new();
    flatten_leaves(&value, "", &mut overlays);
    build_from_overlays(overlays)
}

/// Parse a config file; `.json` selects the JSON form, anything else the
/// flat format. The parsed config is validated.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DetcoError::io(path.display().to_string(), e))?;
    let cfg = if path.extension().and_then(|e| e.to_str()) == Some("json") {
        parse_json_str(&text)?
    } else {
        parse_flat_str(&text)?
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Materialize every effective value as flat `key = value` lines (sorted).
pub fn emit_flat(cfg: &ExperimentConfig) -> String {
    let tree = serde_json::to_value(cfg).expect("serializable");
    let mut leaves = Vec::new();
    flatten_leaves(&tree, "", &mut leaves);
    leaves.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = String::new();
    for (key, value) in leaves {
        out.push_str(&format!("{key} = {value}\n"));
    }
    out
}
