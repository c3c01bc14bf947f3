//! Line-oriented `key = value` configuration.
//!
//! The file format is deliberately plain: one assignment per line, `#`
//! starts a comment, blank lines are ignored, unknown keys are rejected.
//! Command-line flags override file keys, which override built-in defaults.

use std::path::Path;

use crate::attention::SkipMode;
use crate::loss::LossWeights;
use crate::model::{AttnConfig, ModelConfig};
use crate::train::{SplitFractions, TrainConfig};

/// Parses `key = value` lines; returns `(key, value)` pairs in order.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1));
        };
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Numeric scalar-element mode of the whole pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Every tunable of the pipeline with its default. Keys are listed by
/// [`RunConfig::describe_keys`]; the documented defaults follow the
/// reference training regimen (learning rate 1e-5, 150 epochs, 128x128
/// inputs, 70/10/20 split, equal loss weights).
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            precision: Precision::F32,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("config key `{key}`: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(format!("config key `{key}`: expected a boolean, got `{other}`")),
    }
}

fn parse_split(value: &str) -> Result<SplitFractions, String> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!(
            "config key `train.split`: expected `train,test,validation`, got `{value}`"
        ));
    }
    let f: Vec<f64> = parts
        .iter()
        .map(|p| p.parse().map_err(|e| format!("config key `train.split`: {e}")))
        .collect::<Result<_, _>>()?;
    let s = SplitFractions {
        train: f[0],
        test: f[1],
        validation: f[2],
    };
    s.validate()?;
    Ok(s)
}

fn parse_hal_levels(value: &str) -> Result<Option<Vec<bool>>, String> {
    if value == "all" {
        return Ok(None);
    }
    let mask: Vec<bool> = value
        .split(',')
        .map(|p| match p.trim() {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(format!(
                "config key `attn.hal_levels`: expected 0/1 entries or `all`, got `{other}`"
            )),
        })
        .collect::<Result<_, _>>()?;
    Ok(Some(mask))
}

impl RunConfig {
    /// Applies one assignment. Unknown keys are rejected, naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "model.levels" => self.model.levels = parse(key, value)?,
            "model.base_channels" => self.model.base_channels = parse(key, value)?,
            "model.input" => {
                let edge: usize = parse(key, value)?;
                self.model.input_hw = (edge, edge);
            }
            "model.residual" => self.model.residual = parse_bool(key, value)?,
            "attn.cbam" => self.model.attn.cbam = parse_bool(key, value)?,
            "attn.hal" => self.model.attn.hal = parse_bool(key, value)?,
            "attn.hal_levels" => self.model.attn.hal_levels = parse_hal_levels(value)?,
            "attn.skip_mode" => self.model.attn.skip_mode = parse(key, value)?,
            "attn.patch" => self.model.attn.patch = parse(key, value)?,
            "attn.reduction" => self.model.attn.reduction = parse(key, value)?,
            "attn.dim" => self.model.attn.dim = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.lr" => self.train.learning_rate = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.split" => self.train.split = parse_split(value)?,
            "train.threshold" => self.train.threshold = parse(key, value)?,
            "train.max_steps" => self.train.max_steps = parse(key, value)?,
            "train.stop_dice" => {
                let v: f64 = parse(key, value)?;
                self.train.stop_dice = (v > 0.0).then_some(v);
            }
            "loss.alpha" => self.train.weights.alpha = parse(key, value)?,
            "loss.beta" => self.train.weights.beta = parse(key, value)?,
            "loss.lambda" => self.train.weights.lambda = parse(key, value)?,
            "loss.focal_alpha" => self.train.focal.alpha = parse(key, value)?,
            "loss.focal_gamma" => self.train.focal.gamma = parse(key, value)?,
            "precision" => self.precision = parse(key, value)?,
            other => return Err(format!("unknown config key `{other}`")),
        }
        Ok(())
    }

    /// Reads a config file over the current values.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        for (key, value) in parse_kv_lines(&text)? {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    /// One line per key: name, default, meaning. Rendered into `--help`.
    pub fn describe_keys() -> String {
        let d = RunConfig::default();
        let rows: Vec<(String, String, &str)> = vec![
            ("model.levels".into(), d.model.levels.to_string(), "encoder/decoder depth"),
            ("model.base_channels".into(), d.model.base_channels.to_string(), "channels at the first level (doubles per level)"),
            ("model.input".into(), d.model.input_hw.0.to_string(), "working image edge in pixels"),
            ("model.residual".into(), d.model.residual.to_string(), "residual shortcuts in conv blocks"),
            ("attn.cbam".into(), d.model.attn.cbam.to_string(), "channel/spatial attention on skips"),
            ("attn.hal".into(), d.model.attn.hal.to_string(), "hybrid sparse/dense attention on skips"),
            ("attn.hal_levels".into(), "all".into(), "per-level HAL mask, e.g. 1,0,1,1"),
            ("attn.skip_mode".into(), d.model.attn.skip_mode.to_string(), "series | parallel_sum"),
            ("attn.patch".into(), d.model.attn.patch.to_string(), "attention patch edge M"),
            ("attn.reduction".into(), d.model.attn.reduction.to_string(), "channel-attention reduction ratio r"),
            ("attn.dim".into(), d.model.attn.dim.to_string(), "projection width d (0 = channel count)"),
            ("train.epochs".into(), d.train.epochs.to_string(), "training epochs"),
            ("train.lr".into(), format!("{:e}", d.train.learning_rate), "Adam learning rate"),
            ("train.batch_size".into(), d.train.batch_size.to_string(), "mini-batch size"),
            ("train.seed".into(), d.train.seed.to_string(), "RNG seed (init, shuffle, split)"),
            ("train.split".into(), "0.7,0.1,0.2".into(), "train,test,validation fractions"),
            ("train.threshold".into(), d.train.threshold.to_string(), "mask binarization threshold"),
            ("train.max_steps".into(), d.train.max_steps.to_string(), "optimizer step cap (0 = none)"),
            ("train.stop_dice".into(), "0".into(), "stop when validation Dice reaches this (0 = off)"),
            ("loss.alpha".into(), format!("{:.6}", d.train.weights.alpha), "Dice loss weight"),
            ("loss.beta".into(), format!("{:.6}", d.train.weights.beta), "BCE loss weight"),
            ("loss.lambda".into(), format!("{:.6}", d.train.weights.lambda), "focal loss weight"),
            ("loss.focal_alpha".into(), d.train.focal.alpha.to_string(), "focal balancing factor"),
            ("loss.focal_gamma".into(), d.train.focal.gamma.to_string(), "focal focusing exponent"),
            ("precision".into(), d.precision.to_string(), "f32 (fast) | f64 (verification)"),
        ];
        let mut out = String::from("Configuration keys (file: `key = value` lines, `#` comments):\n");
        for (key, default, doc) in rows {
            out.push_str(&format!("  {key:<22} default {default:<12} {doc}\n"));
        }
        out
    }
}

/// Serializes the architecture-defining keys, for checkpoint embedding.
pub fn model_config_to_text(cfg: &ModelConfig) -> String {
    let hal_levels = match &cfg.attn.hal_levels {
        None => "all".to_string(),
        Some(mask) => mask
            .iter()
            .map(|&b| if b { "1" } else { "0" })
            .collect::<Vec<_>>()
            .join(","),
    };
    format!(
        "model.levels = {}\nmodel.base_channels = {}\nmodel.input = {}\nmodel.residual = {}\n\
         attn.cbam = {}\nattn.hal = {}\nattn.hal_levels = {}\nattn.skip_mode = {}\n\
         attn.patch = {}\nattn.reduction = {}\nattn.dim = {}\n",
        cfg.levels,
        cfg.base_channels,
        cfg.input_hw.0,
        cfg.residual,
        cfg.attn.cbam,
        cfg.attn.hal,
        hal_levels,
        cfg.attn.skip_mode,
        cfg.attn.patch,
        cfg.attn.reduction,
        cfg.attn.dim,
    )
}

/// Parses the text produced by [`model_config_to_text`].
pub fn model_config_from_text(text: &str) -> Result<ModelConfig, String> {
    let mut cfg = ModelConfig {
        attn: AttnConfig::default(),
        ..ModelConfig::default()
    };
    for (key, value) in parse_kv_lines(text)? {
        match key.as_str() {
            "model.levels" => cfg.levels = parse(&key, &value)?,
            "model.base_channels" => cfg.base_channels = parse(&key, &value)?,
            "model.input" => {
                let edge: usize = parse(&key, &value)?;
                cfg.input_hw = (edge, edge);
            }
            "model.residual" => cfg.residual = parse_bool(&key, &value)?,
            "attn.cbam" => cfg.attn.cbam = parse_bool(&key, &value)?,
            "attn.hal" => cfg.attn.hal = parse_bool(&key, &value)?,
            "attn.hal_levels" => cfg.attn.hal_levels = parse_hal_levels(&value)?,
            "attn.skip_mode" => cfg.attn.skip_mode = parse::<SkipMode>(&key, &value)?,
            "attn.patch" => cfg.attn.patch = parse(&key, &value)?,
            "attn.reduction" => cfg.attn.reduction = parse(&key, &value)?,
            "attn.dim" => cfg.attn.dim = parse(&key, &value)?,
            other => return Err(format!("unknown model config key `{other}`")),
        }
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// Table 1-style loss presets: every combination of the three terms, equal
/// weights within each combination.
pub fn loss_presets() -> Vec<(&'static str, LossWeights)> {
    let w = |alpha: f64, beta: f64, lambda: f64| LossWeights { alpha, beta, lambda };
    vec![
        ("bce", w(0.0, 1.0, 0.0)),
        ("dice", w(1.0, 0.0, 0.0)),
        ("focal", w(0.0, 0.0, 1.0)),
        ("bce+dice", w(0.5, 0.5, 0.0)),
        ("bce+focal", w(0.0, 0.5, 0.5)),
        ("dice+focal", w(0.5, 0.0, 0.5)),
        ("bce+dice+focal", w(1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0)),
    ]
}
