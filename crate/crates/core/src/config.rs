//! Training configuration and its plain-text `key = value` form.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, StegoError};
use crate::extractor::DEFAULT_TOLERANCE;
use crate::stylizer::{ArchConfig, DOWNSAMPLE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub crop_size: usize,
    pub iterations: u64,
    pub lr: f64,
    pub batch: usize,
    /// Style-loss weight.
    pub lambda: f64,
    /// Secret-loss weight.
    pub mu: f64,
    /// Hinge threshold of the secret loss.
    pub tolerance: f64,
    pub msg_len: usize,
    pub seed: u64,
    /// Stego key used for every training message.
    pub key: u64,
    /// Reuse a single message for every step.
    pub overfit: bool,
    pub save_every: u64,
    pub content_dir: PathBuf,
    pub style_dir: PathBuf,
    #[serde(flatten)]
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            crop_size: 64,
            iterations: 5000,
            lr: 2e-4,
            batch: 1,
            lambda: 1.0,
            mu: 1.0,
            tolerance: DEFAULT_TOLERANCE,
            msg_len: 64,
            seed: 0,
            key: 0,
            overfit: false,
            save_every: 500,
            content_dir: PathBuf::from("data/toy/content"),
            style_dir: PathBuf::from("data/toy/style"),
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StegoError::Config(m));
        self.arch.validate()?;
        if self.crop_size == 0 || self.crop_size % DOWNSAMPLE != 0 {
            return bad(format!("crop_size {} must be a positive multiple of {DOWNSAMPLE}", self.crop_size));
        }
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if self.batch == 0 || self.save_every == 0 {
            return bad("batch and save_every must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(self.lambda > 0.0 && self.mu > 0.0) || !self.lambda.is_finite() || !self.mu.is_finite() {
            return bad(format!("loss weights must be positive (lambda {}, mu {})", self.lambda, self.mu));
        }
        if !(self.tolerance >= 0.0) {
            return bad(format!("tolerance {} must be non-negative", self.tolerance));
        }
        let cells = self.crop_size / DOWNSAMPLE;
        let capacity = cells * cells * self.arch.secret_channels;
        if self.msg_len == 0 || self.msg_len > capacity {
            return bad(format!("msg_len {} must lie in 1..={capacity} for crop {}", self.msg_len, self.crop_size));
        }
        if 1usize.checked_shl(self.arch.disc_layers as u32).is_none_or(|s| s > self.crop_size) {
            return bad(format!(
                "{} discriminator layers over-reduce a {} px crop",
                self.arch.disc_layers, self.crop_size
            ));
        }
        Ok(())
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.apply(&[(key.to_string(), value.to_string())])
    }

    /// Applies overrides atomically: on error `self` is unchanged.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let Value::Object(mut map) = serde_json::to_value(&*self)? else {
            unreachable!("config serializes to an object")
        };
        for (k, v) in pairs {
            let slot = map.get(k).ok_or_else(|| StegoError::Config(format!("unknown config key `{k}`")))?;
            let parsed = parse_like(slot, v).ok_or_else(|| {
                StegoError::Config(format!("cannot parse `{v}` for `{k}` (expected {})", kind(slot)))
            })?;
            map.insert(k.clone(), parsed);
        }
        *self = serde_json::from_value(Value::Object(map))?;
        Ok(())
    }

    /// Defaults overridden by a config file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&parse_pairs(&std::fs::read_to_string(path)?)?)?;
        Ok(cfg)
    }

    /// `key = value` lines, sorted by key.
    pub fn to_text(&self) -> String {
        let Ok(Value::Object(map)) = serde_json::to_value(self) else {
            unreachable!("config serializes to an object")
        };
        let map: std::collections::BTreeMap<_, _> = map.into_iter().collect();
        map.iter()
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k} = {s}\n"),
                v => format!("{k} = {v}\n"),
            })
            .collect()
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Bool(_) => "true or false",
        Value::Number(n) if n.is_u64() => "a non-negative integer",
        Value::Number(_) => "a number",
        _ => "text",
    }
}

fn parse_like(slot: &Value, raw: &str) -> Option<Value> {
    match slot {
        Value::Bool(_) => raw.parse::<bool>().ok().map(Value::Bool),
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().ok().map(Value::from),
        Value::Number(_) => raw.parse::<f64>().ok().filter(|f| f.is_finite()).map(Value::from),
        _ => Some(Value::String(raw.to_string())),
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| StegoError::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
