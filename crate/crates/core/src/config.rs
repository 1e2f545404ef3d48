//! Run configuration: one TOML document with sections `model`, `diffusion`,
//! `codec`, `prior`, `train`, `data` and `eval`, plus a top-level `seed`.
//!
//! Presets `tiny`, `desk` and `full` are compiled in. Any key can be
//! overridden with `section.key=value`; the value is parsed as a TOML literal
//! and falls back to a plain string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig};
use crate::codec::CodecSpec;
use crate::diffusion::ScheduleFamily;
use crate::error::{Error, Result};
use crate::optim::AdamWConfig;
use crate::prior::{default_pairing, PriorGuidance, DEFAULT_ALPHA};

const PRESETS: &[(&str, &str)] = &[
    ("tiny", include_str!("../presets/tiny.toml")),
    ("desk", include_str!("../presets/desk.toml")),
    ("full", include_str!("../presets/full.toml")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    /// `linear-beta` or `cosine`.
    pub schedule: String,
}

impl DiffusionConfig {
    pub fn family(&self) -> Result<ScheduleFamily> {
        self.schedule.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    /// `toy`, `replay` or `none`.
    pub kind: String,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Toy prior patch size in pixels.
    #[serde(default = "default_prior_patch")]
    pub patch: usize,
    /// Spatial block (0-based, among spatial blocks) for each level; empty
    /// spreads the levels evenly over the depth.
    #[serde(default)]
    pub pairing: Vec<usize>,
    /// Map file for the `replay` kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_path: Option<PathBuf>,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_levels() -> usize {
    4
}

fn default_prior_patch() -> usize {
    4
}

impl PriorConfig {
    pub fn enabled(&self) -> bool {
        self.kind != "none"
    }

    pub fn resolved_pairing(&self, spatial_blocks: usize) -> Vec<usize> {
        if self.pairing.is_empty() {
            default_pairing(self.levels, spatial_blocks)
        } else {
            self.pairing.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub ema_decay: f64,
    /// Fraction of each batch drawn as single frames.
    pub image_ratio: f64,
    pub hflip_prob: f64,
    /// Validation evaluations without improvement before stopping; 0 disables.
    pub patience: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub val_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Steps of linear warmup from `lr / warmup_steps` to `lr`.
    #[serde(default)]
    pub warmup_steps: usize,
}

/// Learning-rate curve over `max_steps`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` after warmup down to 0 at `max_steps`.
    Cosine,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            lr: adam.lr,
            batch_size: 5,
            max_steps: 150_000,
            ema_decay: 0.9999,
            image_ratio: 0.25,
            hflip_prob: 0.5,
            patience: 10,
            eval_every: 1000,
            checkpoint_every: 5000,
            val_fraction: 0.05,
            beta1: adam.beta1,
            beta2: adam.beta2,
            weight_decay: adam.weight_decay,
            eps: adam.eps,
            grad_clip: adam.grad_clip,
            lr_schedule: LrSchedule::Constant,
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
        }
    }

    /// Learning rate for the update taking the model from `step` to `step + 1`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let span = self.max_steps.saturating_sub(self.warmup_steps).max(1);
                let p = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }

    /// Share of video samples; always `1 - image_ratio`.
    pub fn video_ratio(&self) -> f64 {
        1.0 - self.image_ratio
    }

    pub fn validate(&self) -> Result<()> {
        self.adamw().validate()?;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if !unit(self.ema_decay) || !unit(self.image_ratio) || !unit(self.hflip_prob) {
            return Err(Error::config(
                "ema_decay, image_ratio and hflip_prob must lie in [0, 1]",
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("train.val_fraction must lie in [0, 1)"));
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::config(
                "eval_every and checkpoint_every must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub clip_len: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub count: usize,
    pub clip_len: usize,
    pub is_splits: usize,
    pub extractor_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            count: 2048,
            clip_len: 16,
            is_splits: 10,
            extractor_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: BackboneConfig,
    pub diffusion: DiffusionConfig,
    pub codec: CodecSpec,
    pub prior: PriorConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

pub fn preset_text(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            Error::config(format!(
                "unknown preset `{name}` (have {})",
                preset_names().join(", ")
            ))
        })
}

fn parse_override(text: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{text}` is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override key `{key}`")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn apply_override(doc: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = doc;
    for p in parents {
        table = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("`{p}` is not a section")))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        for o in overrides {
            let (path, value) = parse_override(o)?;
            apply_override(&mut doc, &path, value)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::from_toml_str(preset_text(name)?, &[])
    }

    /// Reads a config file, or a preset when `source` names one.
    pub fn load(source: &str, overrides: &[String]) -> Result<Self> {
        if let Ok(text) = preset_text(source) {
            if !Path::new(source).exists() {
                return Self::from_toml_str(text, overrides);
            }
        }
        let text = std::fs::read_to_string(source).map_err(|e| Error::io(source, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.codec.validate()?;
        self.train.validate()?;
        self.diffusion.family()?;
        if self.diffusion.steps == 0 {
            return Err(Error::config("diffusion.steps must be at least 1"));
        }
        let (h, w) = self.codec.latent_size(self.data.height, self.data.width)?;
        if (h, w, self.codec.channels)
            != (
                self.model.latent_height,
                self.model.latent_width,
                self.model.latent_channels,
            )
        {
            return Err(Error::config(format!(
                "codec turns {}x{} frames into {h}x{w}x{}, model expects {}x{}x{}",
                self.data.height,
                self.data.width,
                self.codec.channels,
                self.model.latent_height,
                self.model.latent_width,
                self.model.latent_channels
            )));
        }
        if self.data.clip_len != self.model.frames {
            return Err(Error::config(format!(
                "data.clip_len {} differs from model.frames {}",
                self.data.clip_len, self.model.frames
            )));
        }
        if self.data.stride == 0 {
            return Err(Error::config("data.stride must be positive"));
        }
        match self.prior.kind.as_str() {
            "none" => {}
            "toy" => {
                if self.data.height != self.data.width {
                    return Err(Error::config("toy prior needs square frames"));
                }
                if self.prior.patch == 0 || !self.data.height.is_multiple_of(self.prior.patch) {
                    return Err(Error::config("prior.patch must divide the frame size"));
                }
            }
            "replay" => {
                if self.prior.replay_path.is_none() {
                    return Err(Error::config("replay prior needs prior.replay_path"));
                }
            }
            other => return Err(Error::config(format!("unknown prior kind `{other}`"))),
        }
        if self.prior.enabled() {
            if !self.prior.alpha.is_finite() || self.prior.alpha < 0.0 {
                return Err(Error::config("prior.alpha must be finite and non-negative"));
            }
            let pairing = self.prior.resolved_pairing(self.model.spatial_blocks());
            if pairing.len() != self.prior.levels {
                return Err(Error::config("prior.pairing must list one block per level"));
            }
            if pairing.iter().any(|&b| b >= self.model.spatial_blocks()) {
                return Err(Error::config(format!(
                    "prior.pairing {:?} exceeds the {} spatial blocks",
                    pairing,
                    self.model.spatial_blocks()
                )));
            }
        }
        Ok(())
    }

    /// Trainable scalars: backbone plus one adapter per prior level.
    pub fn parameter_count(&self) -> usize {
        let adapters = if self.prior.enabled() {
            PriorGuidance::parameter_count(self.prior.levels)
        } else {
            0
        };
        Backbone::parameter_count(&self.model) + adapters
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_warmup_and_cosine() {
        let mut t = TrainConfig {
            lr: 1.0,
            max_steps: 110,
            warmup_steps: 10,
            lr_schedule: LrSchedule::Cosine,
            ..TrainConfig::default()
        };
        assert_eq!(t.lr_at(0), 0.1);
        assert_eq!(t.lr_at(9), 1.0);
        assert_eq!(t.lr_at(10), 1.0);
        assert!((t.lr_at(60) - 0.5).abs() < 1e-12);
        assert!(t.lr_at(110).abs() < 1e-12);
        assert!(t.lr_at(500).abs() < 1e-12);
        t.lr_schedule = LrSchedule::Constant;
        assert_eq!(t.lr_at(500), 1.0);
        let cfg = RunConfig::load("tiny", &["train.lr_schedule=cosine".to_string()]).unwrap();
        assert_eq!(cfg.train.lr_schedule, LrSchedule::Cosine);
    }

    #[test]
    fn presets_parse_and_round_trip() {
        for name in preset_names() {
            let cfg = RunConfig::preset(name).unwrap();
            let again = RunConfig::from_toml_str(&cfg.to_toml().unwrap(), &[]).unwrap();
            assert_eq!(cfg, again);
            assert_eq!(cfg.hash().unwrap(), again.hash().unwrap());
        }
    }

    #[test]
    fn full_preset_values() {
        let cfg = RunConfig::preset("full").unwrap();
        assert_eq!(
            (cfg.model.depth, cfg.model.dim, cfg.model.heads),
            (28, 1152, 16)
        );
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.train.batch_size, 5);
        assert_eq!(cfg.prior.alpha, 0.5);
        assert_eq!(cfg.prior.pairing, vec![2, 5, 8, 11]);
        assert_eq!((cfg.data.clip_len, cfg.data.height), (16, 128));
        assert_eq!((cfg.eval.count, cfg.eval.clip_len), (2048, 16));
    }

    #[test]
    fn overrides_apply_and_validate() {
        let cfg = RunConfig::from_toml_str(
            preset_text("tiny").unwrap(),
            &[
                "train.lr=0.5".into(),
                "prior.kind=none".into(),
                "seed=9".into(),
            ],
        )
        .unwrap();
        assert_eq!(
            (cfg.train.lr, cfg.prior.kind.as_str(), cfg.seed),
            (0.5, "none", 9)
        );
        let bad =
            RunConfig::from_toml_str(preset_text("tiny").unwrap(), &["model.frames=4".into()]);
        assert!(matches!(bad, Err(Error::Config(_))));
        assert!(
            RunConfig::from_toml_str(preset_text("tiny").unwrap(), &["train.bogus=1".into()])
                .is_err()
        );
        assert!(RunConfig::from_toml_str(preset_text("tiny").unwrap(), &["nokey".into()]).is_err());
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn defaults_match_documented_values() {
        let t = TrainConfig::default();
        assert_eq!(
            (t.lr, t.batch_size, t.ema_decay, t.image_ratio, t.hflip_prob),
            (1e-4, 5, 0.9999, 0.25, 0.5)
        );
        assert_eq!(
            (t.beta1, t.beta2, t.weight_decay, t.val_fraction),
            (0.9, 0.999, 0.01, 0.05)
        );
        assert!(t.grad_clip.is_none());
        assert_eq!(t.image_ratio + t.video_ratio(), 1.0);
    }
}
