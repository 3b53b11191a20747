//! Training configuration, file loading and `key=value` overrides.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelDims;

/// How samples are ranked before the top-t% split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Indicator {
    /// Cross-entropy between label and manifold affinity distributions.
    Eta,
    /// Per-sample L1 training loss.
    L1,
}

/// Which objective the trainer optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Partitioned training with both alignment terms.
    Seetn,
    /// Plain L1 gaze loss over every sample.
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub t_percent: f64,
    pub lambda: f64,
    pub tau: f64,
    pub alpha: f64,
    pub batch_clean: usize,
    /// Defaults to `max(8, round(batch_clean * t / (100 - t)))`.
    pub batch_noisy: Option<usize>,
    /// Chunk size for indicator scoring; defaults to `batch_clean`.
    pub score_batch: Option<usize>,
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub init_seed: u64,
    pub data_seed: u64,
    pub shuffle_seed: u64,
    pub detach_teacher: bool,
    pub include_diag_in_eta: bool,
    pub warmup_uses_align: bool,
    pub indicator: Indicator,
    pub mode: Mode,
    /// Write a checkpoint every N epochs; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub model: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 12,
            t_percent: 10.0,
            lambda: 0.1,
            tau: 0.1,
            alpha: 0.95,
            batch_clean: 128,
            batch_noisy: None,
            score_batch: None,
            learning_rate: 1e-4,
            warmup_epochs: 10,
            max_epochs: 20,
            init_seed: 0,
            data_seed: 1,
            shuffle_seed: 2,
            detach_teacher: true,
            include_diag_in_eta: true,
            warmup_uses_align: true,
            indicator: Indicator::Eta,
            mode: Mode::Seetn,
            checkpoint_every: 0,
            model: ModelDims::default(),
        }
    }
}

impl TrainConfig {
    /// Settings for heavily corrupted data: 10 warm-up epochs, t = 10%.
    pub fn high_noise() -> Self {
        Self::default()
    }

    /// Settings for mildly corrupted data: 2 warm-up epochs, t = 5%.
    pub fn low_noise() -> Self {
        Self {
            t_percent: 5.0,
            warmup_epochs: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.k < 2 {
            return bad(format!("k must be >= 2, got {}", self.k));
        }
        if !(0.0..100.0).contains(&self.t_percent) {
            return bad(format!("t_percent {} outside [0, 100)", self.t_percent));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if self.batch_clean < 2 {
            return bad(format!("batch_clean must be >= 2, got {}", self.batch_clean));
        }
        if matches!(self.score_batch, Some(b) if b < 2) {
            return bad("score_batch must be >= 2".into());
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate {} invalid", self.learning_rate));
        }
        let d = &self.model;
        if [d.input, d.hidden, d.feature, d.proj_hidden, d.proj].contains(&0) {
            return bad("model dimensions must be positive".into());
        }
        Ok(())
    }

    /// Noisy mini-batch size actually used.
    pub fn noisy_batch(&self) -> usize {
        self.batch_noisy.unwrap_or_else(|| {
            let t = self.t_percent;
            let prop = (self.batch_clean as f64 * t / (100.0 - t)).round() as usize;
            prop.max(8)
        })
    }

    pub fn scoring_batch(&self) -> usize {
        self.score_batch.unwrap_or(self.batch_clean)
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = load_file(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides; nested keys use dots (`model.hidden=32`).
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let cfg: Self = apply_overrides(self, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reads TOML, falling back to JSON.
pub fn load_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    parse_config(&text)
}

pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    match toml::from_str(text) {
        Ok(v) => Ok(v),
        Err(toml_err) => serde_json::from_str(text).map_err(|json_err| {
            // report the TOML error unless the text looks like JSON
            if text.trim_start().starts_with('{') {
                Error::InvalidConfig(json_err.to_string())
            } else {
                Error::InvalidConfig(toml_err.to_string())
            }
        }),
    }
}

fn parse_scalar(raw: &str) -> serde_json::Value {
    if let Ok(v) = raw.parse::<i64>() {
        return v.into();
    }
    if let Ok(v) = raw.parse::<f64>() {
        return v.into();
    }
    match raw {
        "true" => true.into(),
        "false" => false.into(),
        "null" | "none" => serde_json::Value::Null,
        s => s.into(),
    }
}

/// Sets dotted keys on the JSON form of `base` and deserializes the result.
/// Array elements are addressed by index (`yaw_range_deg.1=60`). Unknown keys
/// are rejected.
pub fn apply_overrides<T, S>(base: &T, overrides: &[S]) -> Result<T>
where
    T: Serialize + DeserializeOwned,
    S: AsRef<str>,
{
    let mut root = serde_json::to_value(base).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    for ov in overrides {
        let ov = ov.as_ref();
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override {ov:?} is not key=value")))?;
        let mut slot = &mut root;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let unknown = || Error::InvalidConfig(format!("unknown config key {key:?}"));
            slot = match slot {
                serde_json::Value::Object(obj) => obj.get_mut(*part).ok_or_else(unknown)?,
                serde_json::Value::Array(items) => part
                    .parse::<usize>()
                    .ok()
                    .and_then(|i| items.get_mut(i))
                    .ok_or_else(unknown)?,
                _ => return Err(unknown()),
            };
            if i + 1 == parts.len() {
                *slot = parse_scalar(raw.trim());
            }
        }
    }
    serde_json::from_value(root).map_err(|e| Error::InvalidConfig(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_reference_settings() {
        let c = TrainConfig::default();
        assert_eq!(c.k, 12);
        assert_eq!(c.lambda, 0.1);
        assert_eq!(c.alpha, 0.95);
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.batch_clean, 128);
        assert_eq!(TrainConfig::high_noise().warmup_epochs, 10);
        assert_eq!(TrainConfig::high_noise().t_percent, 10.0);
        assert_eq!(TrainConfig::low_noise().warmup_epochs, 2);
        assert_eq!(TrainConfig::low_noise().t_percent, 5.0);
        c.validate().unwrap();
    }

    #[test]
    fn noisy_batch_rule() {
        let mut c = TrainConfig::default();
        assert_eq!(c.noisy_batch(), 14);
        c.t_percent = 20.0;
        assert_eq!(c.noisy_batch(), 32);
        c.t_percent = 1.0;
        assert_eq!(c.noisy_batch(), 8);
        c.batch_noisy = Some(3);
        assert_eq!(c.noisy_batch(), 3);
    }

    #[test]
    fn toml_and_json_round_trip() {
        let c = TrainConfig {
            batch_noisy: Some(16),
            ..TrainConfig::low_noise()
        };
        let back: TrainConfig = parse_config(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let json = serde_json::to_string(&c).unwrap();
        let back: TrainConfig = parse_config(&json).unwrap();
        assert_eq!(back, c);
        let partial: TrainConfig = parse_config("k = 4\n[model]\ninput = 8\nhidden = 8\nfeature = 8\nproj_hidden = 8\nproj = 4\n").unwrap();
        assert_eq!(partial.k, 4);
        assert_eq!(partial.model.input, 8);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            parse_config::<TrainConfig>("bogus = 1"),
            Err(Error::InvalidConfig(_))
        ));
        let c = TrainConfig::default();
        assert!(c.with_overrides(&["bogus=1"]).is_err());
        assert!(c.with_overrides(&["model.bogus=1"]).is_err());
        assert!(c.with_overrides(&["t_percent"]).is_err());
    }

    #[test]
    fn overrides_apply_and_validate() {
        let c = TrainConfig::default()
            .with_overrides(&["t_percent=20", "model.hidden=8", "indicator=l1", "batch_noisy=5"])
            .unwrap();
        assert_eq!(c.t_percent, 20.0);
        assert_eq!(c.model.hidden, 8);
        assert_eq!(c.indicator, Indicator::L1);
        assert_eq!(c.batch_noisy, Some(5));
        assert!(TrainConfig::default().with_overrides(&["t_percent=100"]).is_err());
        assert_ne!(c.hash(), TrainConfig::default().hash());
    }
}
