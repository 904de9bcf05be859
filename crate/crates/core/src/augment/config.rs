//! Tunables for the augmentation pipeline. Every field has a default, so a
//! config file only needs the keys it changes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config does not parse: {0}")]
    Parse(String),
}

/// Inclusive integer range, written as `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange(pub u32, pub u32);

impl IntRange {
    pub fn min(&self) -> u32 {
        self.0
    }

    pub fn max(&self) -> u32 {
        self.1
    }
}

/// Inclusive real range, written as `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloatRange(pub f64, pub f64);

/// Inclusive 8-bit channel range, written as `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelRange(pub u8, pub u8);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub name: String,
    pub r: ChannelRange,
    pub g: ChannelRange,
    pub b: ChannelRange,
}

impl PaletteEntry {
    pub fn brown() -> Self {
        Self {
            name: "brown".into(),
            r: ChannelRange(80, 90),
            g: ChannelRange(50, 60),
            b: ChannelRange(50, 60),
        }
    }
}

/// Symmetric magnitudes: each parameter is drawn from `[-v, v]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometricConfig {
    pub rotate_deg: f64,
    pub shear: f64,
    pub translate_frac: f64,
}

impl Default for GeometricConfig {
    fn default() -> Self {
        Self {
            rotate_deg: 10.0,
            shear: 0.1,
            translate_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhotometricConfig {
    /// Additive, 8-bit scale, drawn from `[-v, v]`.
    pub brightness_delta: f64,
    pub contrast: FloatRange,
    pub saturation: FloatRange,
    /// Hue rotation in degrees, drawn from `[-v, v]`.
    pub hue_deg: f64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            brightness_delta: 32.0,
            contrast: FloatRange(0.5, 1.5),
            saturation: FloatRange(0.5, 1.5),
            hue_deg: 18.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResizeConfig {
    pub short_side: IntRange,
    pub long_side_max: u32,
    /// Output `(width, height)`.
    pub target: (u32, u32),
}

impl Default for ResizeConfig {
    fn default() -> Self {
        Self {
            short_side: IntRange(820, 3080),
            long_side_max: 3680,
            target: (1920, 1440),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub seed: u64,
    pub person_category: String,
    pub ball_category: String,
    pub persons_per_image: IntRange,
    pub balls_per_image: IntRange,
    pub interaction_persons: IntRange,
    pub pure_ball_prob: f64,
    pub pure_ball_palette: Vec<PaletteEntry>,
    pub geometric: GeometricConfig,
    pub photometric: PhotometricConfig,
    pub resize: ResizeConfig,
    pub duplication_factor: u32,
    pub max_resample_attempts: u32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            person_category: "human".into(),
            ball_category: "ball".into(),
            persons_per_image: IntRange(1, 3),
            balls_per_image: IntRange(1, 2),
            interaction_persons: IntRange(1, 2),
            pure_ball_prob: 0.5,
            pure_ball_palette: vec![PaletteEntry::brown()],
            geometric: GeometricConfig::default(),
            photometric: PhotometricConfig::default(),
            resize: ResizeConfig::default(),
            duplication_factor: 10,
            max_resample_attempts: 25,
        }
    }
}

impl AugmentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        for (name, r) in [
            ("persons_per_image", self.persons_per_image),
            ("balls_per_image", self.balls_per_image),
            ("interaction_persons", self.interaction_persons),
            ("resize.short_side", self.resize.short_side),
        ] {
            if r.0 > r.1 {
                return bad(format!("{name} is empty: [{}, {}]", r.0, r.1));
            }
        }
        for (name, r) in [
            ("photometric.contrast", self.photometric.contrast),
            ("photometric.saturation", self.photometric.saturation),
        ] {
            if !(r.0.is_finite() && r.1.is_finite() && r.0 <= r.1 && r.0 >= 0.0) {
                return bad(format!("{name} must be a non-empty non-negative range"));
            }
        }
        for (name, v) in [
            ("geometric.rotate_deg", self.geometric.rotate_deg),
            ("geometric.shear", self.geometric.shear),
            ("geometric.translate_frac", self.geometric.translate_frac),
            ("photometric.brightness_delta", self.photometric.brightness_delta),
            ("photometric.hue_deg", self.photometric.hue_deg),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a finite magnitude >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.pure_ball_prob) {
            return bad(format!("pure_ball_prob {} outside [0, 1]", self.pure_ball_prob));
        }
        if self.pure_ball_prob > 0.0 && self.pure_ball_palette.is_empty() {
            return bad("pure_ball_palette is empty".into());
        }
        for e in &self.pure_ball_palette {
            if e.r.0 > e.r.1 || e.g.0 > e.g.1 || e.b.0 > e.b.1 {
                return bad(format!("palette entry {} has an empty channel range", e.name));
            }
        }
        if self.duplication_factor < 1 {
            return bad("duplication_factor must be >= 1".into());
        }
        if self.max_resample_attempts < 1 {
            return bad("max_resample_attempts must be >= 1".into());
        }
        let (tw, th) = self.resize.target;
        if tw == 0 || th == 0 || self.resize.long_side_max == 0 || self.resize.short_side.0 == 0 {
            return bad("resize sizes must be positive".into());
        }
        Ok(())
    }
}
