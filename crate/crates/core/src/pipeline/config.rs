//! Flat `key=value` training configuration. Every key doubles as a CLI flag.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::{AugmentConfig, ViewMode};
use crate::error::{bail, CmaeError, Result};
use crate::model::CmaeConfig;
use crate::nn::VitConfig;
use crate::objectives::{ContrastiveForm, LossConfig};
use crate::pipeline::optim::AdamWConfig;
use crate::tensor::GeluMode;

/// Environment variable consulted for `data_dir` when nothing else sets it.
pub const DATA_DIR_ENV: &str = "CMAE_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = CmaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(CmaeError::Config(format!("unknown precision `{other}` (expected f32 or f64)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub data_dir: Option<PathBuf>,
    pub num_images: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    pub log_interval: usize,
    pub workers: usize,

    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub pdec_depth: usize,
    pub fdec_depth: usize,
    pub share_decoder: bool,
    pub separate_mask_tokens: bool,
    pub contrast_dim: usize,
    pub ema_mu: f64,
    pub gelu: GeluMode,

    pub view_mode: ViewMode,
    pub shift_min: usize,
    pub shift_max: usize,
    pub color_transfer: bool,
    pub color_jitter: f64,
    pub grayscale_prob: f64,
    pub crop_scale_min: f64,
    pub flip_prob: f64,
    pub mask_ratio: f64,
    pub momentum_mask_ratio: f64,

    pub lambda_c: f64,
    pub temperature: f64,
    pub loss_form: ContrastiveForm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = CmaeConfig::desk();
        let a = AugmentConfig::default();
        let l = LossConfig::default();
        TrainConfig {
            data_dir: None,
            num_images: 5000,
            epochs: 20,
            warmup_epochs: 1,
            batch_size: 128,
            base_lr: 1.5e-4,
            weight_decay: AdamWConfig::default().weight_decay,
            seed: 0,
            precision: Precision::F32,
            log_interval: 10,
            workers: 1,
            image_size: m.encoder.image_size,
            patch_size: m.encoder.patch_size,
            dim: m.encoder.dim,
            depth: m.encoder.depth,
            heads: m.encoder.heads,
            mlp_ratio: m.encoder.mlp_ratio,
            decoder_dim: m.decoder_dim,
            decoder_heads: m.decoder_heads,
            pdec_depth: m.pdec_depth,
            fdec_depth: m.fdec_depth,
            share_decoder: m.share_decoder,
            separate_mask_tokens: m.separate_mask_tokens,
            contrast_dim: m.contrast_dim,
            ema_mu: m.ema_mu,
            gelu: m.gelu,
            view_mode: a.view_mode,
            shift_min: a.shift_min,
            shift_max: a.shift_max,
            color_transfer: a.color_transfer,
            color_jitter: a.color_jitter_strength,
            grayscale_prob: a.grayscale_prob,
            crop_scale_min: a.crop_scale.0,
            flip_prob: a.flip_prob,
            mask_ratio: a.mask_ratio_online,
            momentum_mask_ratio: a.mask_ratio_momentum,
            lambda_c: l.lambda_c,
            temperature: l.temperature,
            loss_form: l.form,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.trim().parse().map_err(|_| CmaeError::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!(Config, "invalid boolean `{}` for `{}`", value, key),
    }
}

fn gelu_name(g: GeluMode) -> &'static str {
    match g {
        GeluMode::Tanh => "tanh",
        GeluMode::Erf => "erf",
    }
}

fn view_name(v: ViewMode) -> &'static str {
    match v {
        ViewMode::PixelShift => "shift",
        ViewMode::RandomCrop => "crop",
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 43] = [
        "data_dir",
        "num_images",
        "epochs",
        "warmup_epochs",
        "batch_size",
        "base_lr",
        "weight_decay",
        "seed",
        "precision",
        "log_interval",
        "workers",
        "image_size",
        "patch_size",
        "dim",
        "depth",
        "heads",
        "mlp_ratio",
        "decoder_dim",
        "decoder_heads",
        "pdec_depth",
        "fdec_depth",
        "share_decoder",
        "separate_mask_tokens",
        "contrast_dim",
        "ema_mu",
        "gelu",
        "view_mode",
        "shift_min",
        "shift_max",
        "color_transfer",
        "color_jitter",
        "grayscale_prob",
        "crop_scale_min",
        "flip_prob",
        "mask_ratio",
        "momentum_mask_ratio",
        "lambda_c",
        "temperature",
        "loss_form",
        // Keys below are aliases kept out of the serialized form.
        "mask_ratio_online",
        "lr",
        "batch",
        "shift",
    ];

    /// Keys written by [`TrainConfig::to_kv_text`].
    pub fn canonical_keys() -> &'static [&'static str] {
        &Self::KEYS[..39]
    }

    /// The tiny 64-bit configuration used by gradient and determinism checks.
    pub fn tiny() -> Self {
        let m = CmaeConfig::tiny();
        TrainConfig {
            num_images: 16,
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 4,
            precision: Precision::F64,
            log_interval: 1,
            image_size: m.encoder.image_size,
            patch_size: m.encoder.patch_size,
            dim: m.encoder.dim,
            depth: m.encoder.depth,
            heads: m.encoder.heads,
            mlp_ratio: m.encoder.mlp_ratio,
            decoder_dim: m.decoder_dim,
            decoder_heads: m.decoder_heads,
            pdec_depth: m.pdec_depth,
            fdec_depth: m.fdec_depth,
            contrast_dim: m.contrast_dim,
            gelu: m.gelu,
            ..TrainConfig::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "data_dir" => self.data_dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "num_images" => self.num_images = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "batch_size" | "batch" => self.batch_size = parse(key, v)?,
            "base_lr" | "lr" => self.base_lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "precision" => self.precision = v.parse()?,
            "log_interval" => self.log_interval = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "depth" => self.depth = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, v)?,
            "decoder_dim" => self.decoder_dim = parse(key, v)?,
            "decoder_heads" => self.decoder_heads = parse(key, v)?,
            "pdec_depth" => self.pdec_depth = parse(key, v)?,
            "fdec_depth" => self.fdec_depth = parse(key, v)?,
            "share_decoder" => self.share_decoder = parse_bool(key, v)?,
            "separate_mask_tokens" => self.separate_mask_tokens = parse_bool(key, v)?,
            "contrast_dim" => self.contrast_dim = parse(key, v)?,
            "ema_mu" => self.ema_mu = parse(key, v)?,
            "gelu" => {
                self.gelu = match v {
                    "tanh" => GeluMode::Tanh,
                    "erf" => GeluMode::Erf,
                    _ => bail!(Config, "unknown gelu `{}` (expected tanh or erf)", v),
                }
            }
            "view_mode" => {
                self.view_mode = match v {
                    "shift" => ViewMode::PixelShift,
                    "crop" => ViewMode::RandomCrop,
                    _ => bail!(Config, "unknown view_mode `{}` (expected shift or crop)", v),
                }
            }
            "shift_min" => self.shift_min = parse(key, v)?,
            "shift_max" => self.shift_max = parse(key, v)?,
            "shift" => {
                // `crop`, `p` for [0, p], or `a-b`.
                if v == "crop" {
                    self.view_mode = ViewMode::RandomCrop;
                } else {
                    self.view_mode = ViewMode::PixelShift;
                    match v.split_once('-') {
                        Some((a, b)) => {
                            self.shift_min = parse(key, a)?;
                            self.shift_max = parse(key, b)?;
                        }
                        None => {
                            self.shift_min = 0;
                            self.shift_max = parse(key, v)?;
                        }
                    }
                }
            }
            "color_transfer" => self.color_transfer = parse_bool(key, v)?,
            "color_jitter" => self.color_jitter = parse(key, v)?,
            "grayscale_prob" => self.grayscale_prob = parse(key, v)?,
            "crop_scale_min" => self.crop_scale_min = parse(key, v)?,
            "flip_prob" => self.flip_prob = parse(key, v)?,
            "mask_ratio" | "mask_ratio_online" => self.mask_ratio = parse(key, v)?,
            "momentum_mask_ratio" => self.momentum_mask_ratio = parse(key, v)?,
            "lambda_c" => self.lambda_c = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "loss_form" => self.loss_form = v.parse()?,
            _ => bail!(Config, "unknown config key `{}`", key),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "data_dir" => self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "num_images" => self.num_images.to_string(),
            "epochs" => self.epochs.to_string(),
            "warmup_epochs" => self.warmup_epochs.to_string(),
            "batch_size" | "batch" => self.batch_size.to_string(),
            "base_lr" | "lr" => self.base_lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "seed" => self.seed.to_string(),
            "precision" => self.precision.to_string(),
            "log_interval" => self.log_interval.to_string(),
            "workers" => self.workers.to_string(),
            "image_size" => self.image_size.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "dim" => self.dim.to_string(),
            "depth" => self.depth.to_string(),
            "heads" => self.heads.to_string(),
            "mlp_ratio" => self.mlp_ratio.to_string(),
            "decoder_dim" => self.decoder_dim.to_string(),
            "decoder_heads" => self.decoder_heads.to_string(),
            "pdec_depth" => self.pdec_depth.to_string(),
            "fdec_depth" => self.fdec_depth.to_string(),
            "share_decoder" => self.share_decoder.to_string(),
            "separate_mask_tokens" => self.separate_mask_tokens.to_string(),
            "contrast_dim" => self.contrast_dim.to_string(),
            "ema_mu" => self.ema_mu.to_string(),
            "gelu" => gelu_name(self.gelu).to_string(),
            "view_mode" => view_name(self.view_mode).to_string(),
            "shift_min" => self.shift_min.to_string(),
            "shift_max" => self.shift_max.to_string(),
            "shift" => match self.view_mode {
                ViewMode::RandomCrop => "crop".to_string(),
                ViewMode::PixelShift => format!("{}-{}", self.shift_min, self.shift_max),
            },
            "color_transfer" => self.color_transfer.to_string(),
            "color_jitter" => self.color_jitter.to_string(),
            "grayscale_prob" => self.grayscale_prob.to_string(),
            "crop_scale_min" => self.crop_scale_min.to_string(),
            "flip_prob" => self.flip_prob.to_string(),
            "mask_ratio" | "mask_ratio_online" => self.mask_ratio.to_string(),
            "momentum_mask_ratio" => self.momentum_mask_ratio.to_string(),
            "lambda_c" => self.lambda_c.to_string(),
            "temperature" => self.temperature.to_string(),
            "loss_form" => self.loss_form.to_string(),
            _ => bail!(Config, "unknown config key `{}`", key),
        })
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(Config, "line {}: expected key=value, got `{}`", i + 1, raw.trim());
            };
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_kv_text(&text)
    }

    /// Fills `data_dir` from the environment only when it is still unset.
    pub fn apply_env(&mut self) {
        if self.data_dir.is_none() {
            if let Some(dir) = std::env::var_os(DATA_DIR_ENV).filter(|d| !d.is_empty()) {
                self.data_dir = Some(PathBuf::from(dir));
            }
        }
    }

    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        for key in Self::canonical_keys() {
            out.push_str(key);
            out.push('=');
            out.push_str(&self.get(key).expect("canonical key"));
            out.push('\n');
        }
        out
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv_text(text)?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> CmaeConfig {
        CmaeConfig {
            encoder: VitConfig {
                image_size: self.image_size,
                patch_size: self.patch_size,
                channels: 3,
                dim: self.dim,
                depth: self.depth,
                heads: self.heads,
                mlp_ratio: self.mlp_ratio,
            },
            decoder_dim: self.decoder_dim,
            decoder_heads: self.decoder_heads,
            pdec_depth: self.pdec_depth,
            fdec_depth: self.fdec_depth,
            share_decoder: self.share_decoder,
            separate_mask_tokens: self.separate_mask_tokens,
            contrast_dim: self.contrast_dim,
            ema_mu: self.ema_mu,
            gelu: self.gelu,
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            target_w: self.image_size,
            target_h: self.image_size,
            shift_min: self.shift_min,
            shift_max: self.shift_max,
            color_jitter_strength: self.color_jitter,
            grayscale_prob: self.grayscale_prob,
            mask_ratio_online: self.mask_ratio,
            mask_ratio_momentum: self.momentum_mask_ratio,
            crop_scale: (self.crop_scale_min, 1.0),
            flip_prob: self.flip_prob,
            view_mode: self.view_mode,
            color_transfer: self.color_transfer,
            ..AugmentConfig::default()
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { lambda_c: self.lambda_c, temperature: self.temperature, form: self.loss_form }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            bail!(Config, "batch_size must be at least 2 (InfoNCE needs a negative), got {}", self.batch_size);
        }
        if self.epochs == 0 {
            bail!(Config, "epochs must be positive");
        }
        if self.warmup_epochs > self.epochs {
            bail!(Config, "warmup_epochs {} exceeds epochs {}", self.warmup_epochs, self.epochs);
        }
        if self.num_images < 2 {
            bail!(Config, "num_images must be at least 2");
        }
        if self.log_interval == 0 {
            bail!(Config, "log_interval must be positive");
        }
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            bail!(Config, "learning rate and weight decay must be non-negative");
        }
        for (name, r) in [("mask_ratio", self.mask_ratio), ("momentum_mask_ratio", self.momentum_mask_ratio)] {
            if !(0.0..1.0).contains(&r) {
                bail!(Config, "{} {} outside [0, 1)", name, r);
            }
        }
        self.model_config().validate()?;
        self.augment_config().validate()?;
        self.loss_config().validate()
    }
}
