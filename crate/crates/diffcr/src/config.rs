//! Model/run configuration and the config file parser.
//!
//! The file format is deliberately small: `key = value` lines grouped under
//! `[section]` headers, `#` comments, no quoting or escapes. Unknown keys
//! and malformed lines are errors that carry the line number. The same text
//! format is echoed into checkpoints so a trained model carries the exact
//! configuration that produced it.

use crate::error::{DiffcrError, Result};
use std::fmt::Write as _;

/// Rate-weight presets, lowest index = highest bitrate.
pub const LAMBDA2_PRESETS: [f64; 4] = [0.2, 0.1, 0.05, 0.02];

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    // geometry
    pub image_channels: usize,
    /// Channels of the frozen autoencoder latent.
    pub ae_channels: usize,
    /// Channels of the coded representation `y`.
    pub y_channels: usize,
    pub codec_hidden: usize,
    /// Width of the hyper-latent vectors fed to the vector quantizer.
    pub hyper_dim: usize,
    pub codebook_size: usize,

    // diffusion
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,

    // denoiser
    pub denoiser_base: usize,
    pub time_embed_dim: usize,
    pub semantic_tokens: usize,
    pub semantic_dim: usize,
    pub num_labels: usize,

    // consistency head
    pub fase_hidden: usize,
    pub sigma_data: f64,
    pub t_min: f64,
    pub skip_k: usize,
    pub ema_mu: f64,
    pub cutoff_rho: f64,
    /// Apply the temporal mask to the low band as well as the high band.
    pub mask_both_bands: bool,

    // quantization / rate model
    pub sigma_min: f64,

    // training
    pub preset: u8,
    pub lambda1: f64,
    pub lambda3: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Train-time square crop; 0 disables cropping.
    pub train_crop: usize,
    pub seed: u64,

    // sampler
    pub t_mid_frac: f64,

    // ablation switches
    pub use_cre: bool,
    pub use_fda: bool,
    pub use_semantic: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_channels: 3,
            ae_channels: 4,
            y_channels: 16,
            codec_hidden: 32,
            hyper_dim: 32,
            codebook_size: 64,
            timesteps: 1000,
            schedule: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 2e-2,
            denoiser_base: 24,
            time_embed_dim: 64,
            semantic_tokens: 4,
            semantic_dim: 64,
            num_labels: 4,
            fase_hidden: 64,
            sigma_data: 0.5,
            t_min: 0.0,
            skip_k: 20,
            ema_mu: 0.95,
            cutoff_rho: 0.25,
            mask_both_bands: true,
            sigma_min: 0.01,
            preset: 1,
            lambda1: 1.0,
            lambda3: 1.0,
            lr: 1e-4,
            batch_size: 4,
            stage1_steps: 500,
            stage2_steps: 200,
            train_crop: 0,
            seed: crate::rng::DEFAULT_SEED,
            t_mid_frac: 0.4,
            use_cre: true,
            use_fda: true,
            use_semantic: true,
        }
    }
}

impl ModelConfig {
    /// Rate weight implied by the preset.
    pub fn lambda2(&self) -> f64 {
        LAMBDA2_PRESETS[self.preset as usize % LAMBDA2_PRESETS.len()]
    }

    /// Effective consistency skip, rescaled with the schedule length.
    pub fn skip_k_eff(&self) -> usize {
        ((self.skip_k as f64 * self.timesteps as f64 / 1000.0).round() as usize).max(1)
    }

    /// Mid timestep for two-step decoding.
    pub fn t_mid(&self) -> usize {
        ((self.timesteps as f64 * self.t_mid_frac).round() as usize).clamp(1, self.timesteps - 1)
    }

    /// Inputs are reflect-padded to a multiple of this before encoding.
    /// The autoencoder halves twice, the codec once more, and latent-space
    /// attention uses 8x8 patches at the autoencoder resolution.
    pub fn pad_multiple(&self) -> usize {
        32
    }

    /// Small variant for fast tests: same structure, narrow layers.
    pub fn tiny() -> Self {
        ModelConfig {
            y_channels: 8,
            codec_hidden: 12,
            hyper_dim: 12,
            codebook_size: 16,
            timesteps: 100,
            denoiser_base: 8,
            time_embed_dim: 16,
            semantic_tokens: 2,
            semantic_dim: 16,
            fase_hidden: 16,
            batch_size: 2,
            stage1_steps: 30,
            stage2_steps: 10,
            train_crop: 32,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps < 8 {
            return Err(DiffcrError::invalid("timesteps must be at least 8"));
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(DiffcrError::invalid("need 0 < beta_start <= beta_end < 1"));
        }
        if self.preset as usize >= LAMBDA2_PRESETS.len() {
            return Err(DiffcrError::invalid(format!(
                "preset {} out of range (0..{})",
                self.preset,
                LAMBDA2_PRESETS.len()
            )));
        }
        if self.skip_k_eff() + 2 >= self.timesteps {
            return Err(DiffcrError::invalid("skip_k too large for schedule length"));
        }
        if !(0.0..1.0).contains(&self.t_mid_frac) {
            return Err(DiffcrError::invalid("t_mid_frac must be in (0, 1)"));
        }
        if self.sigma_min <= 0.0 {
            return Err(DiffcrError::invalid("sigma_min must be positive"));
        }
        if self.ema_mu < 0.0 || self.ema_mu >= 1.0 {
            return Err(DiffcrError::invalid("ema_mu must be in [0, 1)"));
        }
        Ok(())
    }

    /// Serialize as the config file format (round-trips through [`parse`]).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[model]");
        let _ = writeln!(s, "image_channels = {}", self.image_channels);
        let _ = writeln!(s, "ae_channels = {}", self.ae_channels);
        let _ = writeln!(s, "y_channels = {}", self.y_channels);
        let _ = writeln!(s, "codec_hidden = {}", self.codec_hidden);
        let _ = writeln!(s, "hyper_dim = {}", self.hyper_dim);
        let _ = writeln!(s, "codebook_size = {}", self.codebook_size);
        let _ = writeln!(s, "denoiser_base = {}", self.denoiser_base);
        let _ = writeln!(s, "time_embed_dim = {}", self.time_embed_dim);
        let _ = writeln!(s, "semantic_tokens = {}", self.semantic_tokens);
        let _ = writeln!(s, "semantic_dim = {}", self.semantic_dim);
        let _ = writeln!(s, "num_labels = {}", self.num_labels);
        let _ = writeln!(s, "fase_hidden = {}", self.fase_hidden);
        let _ = writeln!(s, "[diffusion]");
        let _ = writeln!(
            s,
            "schedule = {}",
            match self.schedule {
                ScheduleKind::Linear => "linear",
                ScheduleKind::Cosine => "cosine",
            }
        );
        let _ = writeln!(s, "timesteps = {}", self.timesteps);
        let _ = writeln!(s, "beta_start = {}", self.beta_start);
        let _ = writeln!(s, "beta_end = {}", self.beta_end);
        let _ = writeln!(s, "sigma_data = {}", self.sigma_data);
        let _ = writeln!(s, "t_min = {}", self.t_min);
        let _ = writeln!(s, "skip_k = {}", self.skip_k);
        let _ = writeln!(s, "ema_mu = {}", self.ema_mu);
        let _ = writeln!(s, "cutoff_rho = {}", self.cutoff_rho);
        let _ = writeln!(s, "mask_both_bands = {}", self.mask_both_bands);
        let _ = writeln!(s, "t_mid_frac = {}", self.t_mid_frac);
        let _ = writeln!(s, "[rate]");
        let _ = writeln!(s, "sigma_min = {}", self.sigma_min);
        let _ = writeln!(s, "preset = {}", self.preset);
        let _ = writeln!(s, "[train]");
        let _ = writeln!(s, "lambda1 = {}", self.lambda1);
        let _ = writeln!(s, "lambda3 = {}", self.lambda3);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "stage1_steps = {}", self.stage1_steps);
        let _ = writeln!(s, "stage2_steps = {}", self.stage2_steps);
        let _ = writeln!(s, "train_crop = {}", self.train_crop);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "[ablation]");
        let _ = writeln!(s, "use_cre = {}", self.use_cre);
        let _ = writeln!(s, "use_fda = {}", self.use_fda);
        let _ = writeln!(s, "use_semantic = {}", self.use_semantic);
        s
    }

    /// Parse the config file format. Starts from defaults: a file only needs
    /// the keys it wants to change.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return Err(DiffcrError::Config {
                        line: lineno,
                        msg: "unterminated section header".into(),
                    });
                }
                // sections are organizational only; keys are globally unique
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(DiffcrError::Config {
                    line: lineno,
                    msg: format!("expected key = value, got {line:?}"),
                });
            };
            let key = k.trim();
            let val = v.trim();
            set_key(&mut cfg, key, val).map_err(|msg| DiffcrError::Config { line: lineno, msg })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set_key(cfg: &mut ModelConfig, key: &str, val: &str) -> std::result::Result<(), String> {
    fn p<T: std::str::FromStr>(val: &str, key: &str) -> std::result::Result<T, String> {
        val.parse()
            .map_err(|_| format!("invalid value {val:?} for {key}"))
    }
    match key {
        "image_channels" => cfg.image_channels = p(val, key)?,
        "ae_channels" => cfg.ae_channels = p(val, key)?,
        "y_channels" => cfg.y_channels = p(val, key)?,
        "codec_hidden" => cfg.codec_hidden = p(val, key)?,
        "hyper_dim" => cfg.hyper_dim = p(val, key)?,
        "codebook_size" => cfg.codebook_size = p(val, key)?,
        "denoiser_base" => cfg.denoiser_base = p(val, key)?,
        "time_embed_dim" => cfg.time_embed_dim = p(val, key)?,
        "semantic_tokens" => cfg.semantic_tokens = p(val, key)?,
        "semantic_dim" => cfg.semantic_dim = p(val, key)?,
        "num_labels" => cfg.num_labels = p(val, key)?,
        "fase_hidden" => cfg.fase_hidden = p(val, key)?,
        "schedule" => {
            cfg.schedule = match val {
                "linear" => ScheduleKind::Linear,
                "cosine" => ScheduleKind::Cosine,
                other => return Err(format!("unknown schedule {other:?}")),
            }
        }
        "timesteps" => cfg.timesteps = p(val, key)?,
        "beta_start" => cfg.beta_start = p(val, key)?,
        "beta_end" => cfg.beta_end = p(val, key)?,
        "sigma_data" => cfg.sigma_data = p(val, key)?,
        "t_min" => cfg.t_min = p(val, key)?,
        "skip_k" => cfg.skip_k = p(val, key)?,
        "ema_mu" => cfg.ema_mu = p(val, key)?,
        "cutoff_rho" => cfg.cutoff_rho = p(val, key)?,
        "mask_both_bands" => cfg.mask_both_bands = p(val, key)?,
        "t_mid_frac" => cfg.t_mid_frac = p(val, key)?,
        "sigma_min" => cfg.sigma_min = p(val, key)?,
        "preset" => cfg.preset = p(val, key)?,
        "lambda1" => cfg.lambda1 = p(val, key)?,
        "lambda3" => cfg.lambda3 = p(val, key)?,
        "lr" => cfg.lr = p(val, key)?,
        "batch_size" => cfg.batch_size = p(val, key)?,
        "stage1_steps" => cfg.stage1_steps = p(val, key)?,
        "stage2_steps" => cfg.stage2_steps = p(val, key)?,
        "train_crop" => cfg.train_crop = p(val, key)?,
        "seed" => cfg.seed = p(val, key)?,
        "use_cre" => cfg.use_cre = p(val, key)?,
        "use_fda" => cfg.use_fda = p(val, key)?,
        "use_semantic" => cfg.use_semantic = p(val, key)?,
        other => return Err(format!("unknown key {other:?}")),
    }
    Ok(())
}
