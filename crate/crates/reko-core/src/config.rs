//! Experiment configuration: one serializable tree covering data, models,
//! training and sweeps, with canonical hashing for run identity.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::models::{DiscriminatorSpec, GeneratorSpec};
use crate::tensor::checkpoint::sha256_hex;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

/// Synthetic dataset parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { seed: 7, n_train: 512, n_eval: 64 }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::InvalidArg("dataset splits must be non-empty".into()));
        }
        Ok(())
    }
}

/// Architecture parameters for teacher, student and discriminator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub teacher_width: usize,
    pub student_width: usize,
    pub depth: usize,
    pub image_size: usize,
    pub disc_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { teacher_width: 32, student_width: 8, depth: 3, image_size: 64, disc_width: 16 }
    }
}

impl ModelConfig {
    pub fn teacher_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            base_width: self.teacher_width,
            depth: self.depth,
            image_size: self.image_size,
            in_channels: crate::synth::CHANNELS,
        }
    }

    pub fn student_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            base_width: self.student_width,
            depth: self.depth,
            image_size: self.image_size,
            in_channels: crate::synth::CHANNELS,
        }
    }

    pub fn disc_spec(&self) -> DiscriminatorSpec {
        DiscriminatorSpec {
            base_width: self.disc_width,
            depth: self.depth,
            image_size: self.image_size,
            in_channels: crate::synth::CHANNELS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher_spec().validate()?;
        self.student_spec().validate()?;
        self.disc_spec().validate()?;
        if self.image_size != crate::synth::IMAGE_SIZE {
            return Err(Error::InvalidArg(format!(
                "image_size {} does not match the {}x{} synthetic data",
                self.image_size,
                crate::synth::IMAGE_SIZE,
                crate::synth::IMAGE_SIZE
            )));
        }
        Ok(())
    }
}

/// Grid for the sensitivity sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub ks: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { alphas: vec![0.5, 1.0, 2.0, 4.0], ks: vec![8, 16, 32] }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.ks.is_empty() {
            return Err(Error::InvalidArg("sweep grids must be non-empty".into()));
        }
        if self.alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::InvalidArg("sweep alphas must be finite and >= 0".into()));
        }
        if self.ks.iter().any(|&k| k < 2) {
            return Err(Error::InvalidArg("sweep ks must be at least 2".into()));
        }
        Ok(())
    }
}

/// Root configuration for every command.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sweep.validate()
    }

    /// Canonical JSON: keys sorted at every level, no whitespace. Two equal
    /// configs always serialize to the same bytes.
    pub fn canonical_json(&self) -> String {
        // serde_json::Value maps are BTreeMaps, so converting through Value
        // sorts keys regardless of struct field order.
        let value = serde_json::to_value(self).expect("config serializes");
        value.to_string()
    }

    /// SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }

    pub fn from_value(value: Value) -> Result<Self> {
        serde_json::from_value(value)
            .map_err(|e| Error::InvalidArg(format!("invalid config: {e}")))
    }
}

/// Applies one `--set path.to.field=value` override onto a config value.
/// The path must name an existing field; the value is parsed as JSON first
/// and falls back to a bare string.
pub fn set_path(root: &mut Value, dotted: &str, raw: &str) -> Result<()> {
    let mut cursor = &mut *root;
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::InvalidArg(format!("bad override key '{dotted}'")));
    }
    for (i, part) in parts.iter().enumerate() {
        let map = cursor
            .as_object_mut()
            .ok_or_else(|| Error::InvalidArg(format!("'{dotted}': '{}' is not an object", parts[..i].join("."))))?;
        cursor = map
            .get_mut(*part)
            .ok_or_else(|| Error::InvalidArg(format!("unknown config key '{dotted}'")))?;
    }
    *cursor = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_json_is_sorted_and_stable() {
        let cfg = ExperimentConfig::default();
        let a = cfg.canonical_json();
        let b = cfg.canonical_json();
        assert_eq!(a, b);
        // Top-level keys appear in sorted order.
        let pos = |k: &str| a.find(&format!("\"{k}\"")).unwrap();
        assert!(pos("data") < pos("model"));
        assert!(pos("model") < pos("sweep"));
        assert!(pos("sweep") < pos("train"));
    }

    #[test]
    fn hash_changes_with_any_field() {
        let base = ExperimentConfig::default();
        let mut other = base.clone();
        other.train.seed += 1;
        assert_ne!(base.hash(), other.hash());
        assert_eq!(base.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn set_path_overrides_nested_fields() {
        let mut v = serde_json::to_value(ExperimentConfig::default()).unwrap();
        set_path(&mut v, "train.epochs", "3").unwrap();
        set_path(&mut v, "train.distill.alpha", "2.5").unwrap();
        set_path(&mut v, "train.distill.baseline", "region_dis").unwrap();
        let cfg = ExperimentConfig::from_value(v).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.distill.alpha, 2.5);
        assert_eq!(cfg.train.distill.baseline, crate::losses::Baseline::RegionDis);
    }

    #[test]
    fn set_path_rejects_unknown_keys() {
        let mut v = serde_json::to_value(ExperimentConfig::default()).unwrap();
        assert!(set_path(&mut v, "train.epoch", "3").is_err());
        assert!(set_path(&mut v, "nope.epochs", "3").is_err());
        assert!(set_path(&mut v, "train..epochs", "3").is_err());
    }

    #[test]
    fn unknown_fields_in_config_are_rejected() {
        let mut v = serde_json::to_value(ExperimentConfig::default()).unwrap();
        v["data"]["typo_field"] = serde_json::json!(1);
        assert!(ExperimentConfig::from_value(v).is_err());
    }

    #[test]
    fn default_config_validates() {
        ExperimentConfig::default().validate().unwrap();
    }
}
