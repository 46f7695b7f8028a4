//! Experiment configuration, read from and written to TOML.
//!
//! Parsing is strict: unknown sections or keys are rejected.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_side: usize,
    pub prompt_len: usize,
    /// Inclusive 1-based layer interval receiving spectral prompts; empty disables them.
    pub spt_range: Vec<usize>,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            width: 32,
            heads: 4,
            patch_size: 4,
            image_side: 48,
            prompt_len: 4,
            spt_range: vec![1, 2],
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Whether 1-based layer `l` receives a spectral prompt.
    pub fn has_spt(&self, l: usize) -> bool {
        match self.spt_range[..] {
            [lo, hi] => (lo..=hi).contains(&l),
            _ => false,
        }
    }

    pub fn spt_layers(&self) -> Vec<usize> {
        (1..=self.layers).filter(|&l| self.has_spt(l)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("[encoder] {m}")));
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.prompt_len == 0 || self.mlp_ratio == 0 {
            return err("layers, width, heads, prompt_len and mlp_ratio must be positive".into());
        }
        if !self.width.is_multiple_of(self.heads) {
            return err(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.patch_size == 0 || self.image_side == 0 || !self.image_side.is_multiple_of(self.patch_size) {
            return err(format!(
                "image_side {} not divisible by patch_size {}",
                self.image_side, self.patch_size
            ));
        }
        match self.spt_range[..] {
            [] => {}
            [lo, hi] if 1 <= lo && lo <= hi && hi <= self.layers => {}
            _ => {
                return err(format!(
                    "spt_range {:?} must be [] or [lo, hi] with 1 <= lo <= hi <= {}",
                    self.spt_range, self.layers
                ))
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub heads: usize,
    /// Fraction of heads assigned to the windowed high-frequency branch.
    pub alpha: f64,
    pub window: usize,
    pub layers: usize,
    /// `false` replaces spectral-guided layers with plain global attention layers.
    pub spectral_guided: bool,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            heads: 4,
            alpha: 0.5,
            window: 3,
            layers: 3,
            spectral_guided: true,
            mlp_ratio: 2,
        }
    }
}

impl DecoderConfig {
    /// Number of high-frequency heads, if `alpha · heads` is an integer.
    pub fn high_heads(&self) -> Option<usize> {
        let h = self.alpha * self.heads as f64;
        let r = h.round();
        ((h - r).abs() < 1e-9 && (0.0..=1.0).contains(&self.alpha)).then_some(r as usize)
    }

    pub fn validate(&self, width: usize, grid_side: usize) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("[decoder] {m}")));
        if self.layers == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return err("layers, heads and mlp_ratio must be positive".into());
        }
        if !width.is_multiple_of(self.heads) {
            return err(format!("width {width} not divisible by {} heads", self.heads));
        }
        if self.high_heads().is_none() {
            return err(format!("alpha {} times {} heads is not an integer", self.alpha, self.heads));
        }
        if self.window == 0 || !grid_side.is_multiple_of(self.window) {
            return err(format!("grid side {grid_side} not divisible by window {}", self.window));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the focal term.
    pub focal_weight: f64,
    /// Weight of the SSIM term.
    pub ssim_weight: f64,
    /// Focusing exponent of the focal loss.
    pub focal_gamma: f64,
    pub ssim_window: usize,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_weight: 1.0,
            ssim_weight: 1.0,
            focal_gamma: 2.0,
            ssim_window: 7,
            ssim_c1: 1e-4,
            ssim_c2: 9e-4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("[loss] {m}")));
        if !(self.focal_weight >= 0.0 && self.ssim_weight >= 0.0) {
            return err("focal_weight and ssim_weight must be non-negative");
        }
        if !(self.focal_gamma >= 0.0) {
            return err("focal_gamma must be non-negative");
        }
        if self.ssim_window == 0 || self.ssim_window.is_multiple_of(2) {
            return err("ssim_window must be odd");
        }
        if !(self.ssim_c1 > 0.0 && self.ssim_c2 > 0.0) {
            return err("ssim stabilizers must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointDtype {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// Root seed; data, initialization and sampling use derived sub-streams.
    pub seed: u64,
    /// Repeats one fixed batch every step.
    pub overfit: bool,
    pub checkpoint_dtype: CheckpointDtype,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 8,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            eps: 1e-8,
            seed: 0,
            overfit: false,
            checkpoint_dtype: CheckpointDtype::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(format!("[train] {m}")));
        if self.batch == 0 {
            return err("batch must be positive");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("lr must be positive and betas in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.eps > 0.0) {
            return err("weight_decay must be non-negative and eps positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Seen classes, background (class 0) included.
    pub seen_classes: usize,
    pub unseen_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape generator for classes 1, 2, ... in order.
    pub generators: Vec<String>,
    /// Shape half-extent range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    pub pixel_noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seen_classes: 6,
            unseen_classes: 2,
            n_train: 512,
            n_test: 64,
            min_shapes: 1,
            max_shapes: 3,
            generators: ["circle", "square", "triangle", "stripes", "cross", "ring", "diamond", "checker"]
                .map(String::from)
                .to_vec(),
            min_size: 8.0,
            max_size: 14.0,
            pixel_noise: 0.03,
        }
    }
}

impl DataConfig {
    pub fn num_classes(&self) -> usize {
        self.seen_classes + self.unseen_classes
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("[data] {m}")));
        if self.seen_classes < 2 {
            return err("need background plus at least one seen shape class".into());
        }
        if self.n_train == 0 || self.n_test == 0 {
            return err("n_train and n_test must be at least 1".into());
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return err("need 1 <= min_shapes <= max_shapes".into());
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return err("need 0 < min_size <= max_size".into());
        }
        if !(self.pixel_noise >= 0.0) {
            return err("pixel_noise must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate(self.encoder.width, self.encoder.grid_side())?;
        self.loss.validate()?;
        self.train.validate()?;
        self.data.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = Config::default();
        let text = cfg.to_toml();
        let back = Config::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::from_toml("[encoder]\nlayerz = 3\n").unwrap_err().to_string();
        assert!(err.contains("layerz"), "{err}");
        assert!(Config::from_toml("[bogus]\nx = 1\n").is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = Config::from_toml("[train]\nsteps = 5\n").unwrap();
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.encoder, EncoderConfig::default());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::from_toml("[encoder]\nspt_range = [3, 9]\n").is_err());
        assert!(Config::from_toml("[decoder]\nalpha = 0.3\n").is_err());
        assert!(Config::from_toml("[decoder]\nwindow = 5\n").is_err());
        assert!(Config::from_toml("[loss]\nssim_window = 4\n").is_err());
        assert!(Config::from_toml("[encoder]\nimage_side = 50\n").is_err());
    }

    #[test]
    fn spt_layers_follow_range() {
        let mut e = EncoderConfig::default();
        assert_eq!(e.spt_layers(), vec![1, 2]);
        e.spt_range = vec![];
        assert!(e.spt_layers().is_empty());
        e.spt_range = vec![2, 4];
        assert_eq!(e.spt_layers(), vec![2, 3, 4]);
    }
}
