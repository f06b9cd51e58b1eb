//! Training configuration, presets and the key-value config file format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reader::InstanceWeight;
use crate::retriever::PseudoLabel;

/// How the loss gap is turned into reader weights and retriever targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingMode {
    Smooth,
    BinaryRetriever,
    BinaryReader,
    BinaryBoth,
}

impl SmoothingMode {
    pub const ALL: [SmoothingMode; 4] = [
        SmoothingMode::Smooth,
        SmoothingMode::BinaryBoth,
        SmoothingMode::BinaryRetriever,
        SmoothingMode::BinaryReader,
    ];

    pub fn instance_weight(self) -> InstanceWeight {
        match self {
            SmoothingMode::BinaryReader | SmoothingMode::BinaryBoth => InstanceWeight::Binary,
            _ => InstanceWeight::Smooth,
        }
    }

    pub fn pseudo_label(self) -> PseudoLabel {
        match self {
            SmoothingMode::BinaryRetriever | SmoothingMode::BinaryBoth => PseudoLabel::Binary,
            _ => PseudoLabel::Smooth,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SmoothingMode::Smooth => "smooth",
            SmoothingMode::BinaryRetriever => "binary_retriever",
            SmoothingMode::BinaryReader => "binary_reader",
            SmoothingMode::BinaryBoth => "binary_both",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Entries retrieved per training instance.
    pub t: usize,
    pub lambda: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub smoothing_mode: SmoothingMode,
    /// Reader and both retriever branches use one backbone.
    pub share_encoders: bool,
    /// `false` trains and evaluates the reader on question and image only.
    pub use_explicit_knowledge: bool,
    pub index_refresh_steps: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Hidden width of the answer head; 0 for a single linear layer.
    pub head_hidden: usize,
    /// Worker threads for per-instance gradients; results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Settings for the small synthetic task on one CPU core.
    pub fn desk() -> Self {
        Self {
            t: 3,
            lambda: 2.0,
            lr: 1e-3,
            lr_decay: 0.75,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            smoothing_mode: SmoothingMode::Smooth,
            share_encoders: true,
            use_explicit_knowledge: true,
            index_refresh_steps: 1,
            d_model: 16,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            head_hidden: 0,
            threads: 1,
        }
    }

    /// Optimizer values for fine-tuning pretrained backbones.
    pub fn pretrained() -> Self {
        Self {
            lr: 1e-5,
            epochs: 30,
            batch_size: 32,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "pretrained" => Ok(Self::pretrained()),
            other => Err(Error::Config(format!("unknown preset {other:?} (desk, pretrained)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(1..=5).contains(&self.t) {
            return fail(format!("t must lie in 1..=5, got {}", self.t));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return fail(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return fail("betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        if self.batch_size == 0 || self.index_refresh_steps == 0 || self.threads == 0 {
            return fail("batch_size, index_refresh_steps and threads must be positive".into());
        }
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return fail("model sizes must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return fail(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        Ok(())
    }

    /// Learning rate during epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys are the field
    /// names, unspecified keys keep their desk defaults.
    pub fn parse_kv(text: &str) -> Result<Self> {
        Self::desk().merge_kv(text)
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn merge_kv(&self, text: &str) -> Result<Self> {
        let mut map = match serde_json::to_value(self)? {
            serde_json::Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !map.contains_key(key) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("unknown key {key:?}"),
                });
            }
            let parsed = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
            map.insert(key.to_string(), parsed);
        }
        let config: Self = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_kv(&fs::read_to_string(path)?)
    }

    /// Inverse of [`TrainConfig::parse_kv`].
    pub fn to_kv(&self) -> String {
        let map = match serde_json::to_value(self).expect("config serializes") {
            serde_json::Value::Object(m) => m,
            _ => unreachable!(),
        };
        let mut out = String::new();
        for (k, v) in map {
            let v = match v {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
