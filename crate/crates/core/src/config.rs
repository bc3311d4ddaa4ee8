//! Flat key-value experiment configuration.
//!
//! Files are TOML with one key per line. Every key can be overridden by an
//! environment variable `FSENET_<KEY>` (upper case), e.g. `FSENET_LR=1e-4` or
//! `FSENET_ALPHA_RANGE=0.3,0.6`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FsenetConfig {
    /// Number of high-frequency pyramid bands.
    pub depth: usize,
    /// Feature channels of the low-frequency branch.
    pub base_channels: usize,
    pub heads: usize,
    /// Axial-attention blocks per stage; also the layer count fused by each alignment block.
    pub dat_blocks: usize,
    pub unet_levels: usize,
    /// Gated blocks per encoder, middle and decoder stage of the UNet.
    pub unet_blocks: usize,
    pub deformable: bool,
    pub alpha_init: f64,
    pub contour_channels: usize,
    pub contour_blocks: usize,
    /// Feature channels used when refining the contour at finer levels.
    pub high_channels: usize,
    pub trm_dilations: Vec<usize>,
    pub se_reduction: usize,
    pub spp_grids: Vec<usize>,
    /// One refinement network shared by all levels instead of one per level.
    pub share_refinement: bool,
    pub lambda_ssim: f64,
    pub seed: u64,

    pub lr: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub crop_size: usize,
    pub synth_prob: f64,
    pub alpha_range: [f64; 2],
    pub grad_clip: f64,
    pub val_every: u64,
    pub checkpoint_every: u64,
    /// Zero the timing column of the loss log so runs produce identical files.
    pub deterministic: bool,
    pub mask_threshold: f64,
    /// Batches prepared ahead of the optimizer by the loader thread.
    pub prefetch: usize,
}

impl Default for FsenetConfig {
    fn default() -> Self {
        FsenetConfig {
            depth: 2,
            base_channels: 32,
            heads: 4,
            dat_blocks: 3,
            unet_levels: 2,
            unet_blocks: 2,
            deformable: true,
            alpha_init: 1.0,
            contour_channels: 16,
            contour_blocks: 3,
            high_channels: 16,
            trm_dilations: vec![1, 2, 4, 8],
            se_reduction: 4,
            spp_grids: vec![1, 2, 4, 8],
            share_refinement: false,
            lambda_ssim: 0.4,
            seed: 0,
            lr: 2e-4,
            lr_min: 1e-6,
            batch_size: 4,
            steps: 10_000,
            crop_size: 512,
            synth_prob: 0.5,
            alpha_range: [0.2, 0.7],
            grad_clip: 1.0,
            val_every: 500,
            checkpoint_every: 500,
            deterministic: true,
            mask_threshold: 0.85,
            prefetch: 2,
        }
    }
}

impl FsenetConfig {
    /// A small network for tests and CPU experiments.
    pub fn toy() -> Self {
        FsenetConfig {
            base_channels: 8,
            heads: 2,
            unet_blocks: 1,
            contour_channels: 8,
            contour_blocks: 1,
            high_channels: 4,
            batch_size: 1,
            crop_size: 256,
            ..Self::default()
        }
    }

    /// Image sides must be multiples of this before entering the network.
    pub fn pad_factor(&self) -> usize {
        1 << (self.depth + self.unet_levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let counts = [
            ("depth", self.depth),
            ("base_channels", self.base_channels),
            ("heads", self.heads),
            ("dat_blocks", self.dat_blocks),
            ("unet_levels", self.unet_levels),
            ("unet_blocks", self.unet_blocks),
            ("contour_channels", self.contour_channels),
            ("contour_blocks", self.contour_blocks),
            ("high_channels", self.high_channels),
            ("se_reduction", self.se_reduction),
            ("batch_size", self.batch_size),
            ("crop_size", self.crop_size),
            ("prefetch", self.prefetch),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !self.base_channels.is_multiple_of(self.heads) {
            return bad(format!(
                "heads ({}) must divide base_channels ({})",
                self.heads, self.base_channels
            ));
        }
        if self.trm_dilations.is_empty() || self.trm_dilations.contains(&0) {
            return bad("trm_dilations must be non-empty positive rates".into());
        }
        if self.spp_grids.contains(&0) {
            return bad("spp_grids must be positive".into());
        }
        if !(self.lambda_ssim >= 0.0) {
            return bad("lambda_ssim must be non-negative".into());
        }
        if self.alpha_init == 0.0 || !self.alpha_init.is_finite() {
            return bad("alpha_init must be finite and non-zero".into());
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad("learning rates must satisfy 0 <= lr_min <= lr, lr > 0".into());
        }
        if !(0.0..=1.0).contains(&self.synth_prob) {
            return bad("synth_prob must lie in [0, 1]".into());
        }
        let [lo, hi] = self.alpha_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad("alpha_range must satisfy 0 <= lo <= hi <= 1".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive".into());
        }
        if !self.crop_size.is_multiple_of(self.pad_factor()) {
            return bad(format!(
                "crop_size must be a multiple of {}",
                self.pad_factor()
            ));
        }
        Ok(())
    }

    /// Parse TOML text, apply overrides from `env`, and validate.
    pub fn from_toml_with_env(text: &str, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        Self::default().merge_toml(text, env)
    }

    /// Like [`FsenetConfig::from_toml_with_env`], with keys missing from
    /// `text` taken from `self` instead of the defaults.
    pub fn merge_toml(&self, text: &str, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let file: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        let known = toml::Table::try_from(self.clone()).expect("config serializes");
        let mut table = known.clone();
        for (key, value) in file {
            table.insert(key, value);
        }
        for key in known.keys() {
            let var = format!("FSENET_{}", key.to_uppercase());
            if let Some(raw) = env(&var) {
                table.insert(key.clone(), parse_override(&raw));
            }
        }
        let cfg: FsenetConfig = table
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_env(text, |k| std::env::var(k).ok())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Interpret an override string as a TOML value; bare comma lists become arrays
/// and anything unparsable is taken as a string.
fn parse_override(raw: &str) -> toml::Value {
    let trimmed = raw.trim();
    let candidate = if trimmed.contains(',') && !trimmed.starts_with('[') {
        format!("[{trimmed}]")
    } else {
        trimmed.to_string()
    };
    toml::from_str::<toml::Table>(&format!("v = {candidate}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(trimmed.to_string()))
}
