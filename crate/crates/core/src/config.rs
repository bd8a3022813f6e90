//! Run configuration: one JSON-serializable record holding every knob.

use crate::posenc::PeMode;
use crate::tensor::Precision;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {key}: {reason}")]
    Invalid { key: &'static str, reason: String },
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
}

fn bad(key: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key, reason: reason.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AlignerKind {
    Bilinear,
    Nearest,
    Deconv,
    UpsampleModule,
    #[default]
    Ifa,
}

impl AlignerKind {
    pub fn all() -> [AlignerKind; 5] {
        [
            AlignerKind::Bilinear,
            AlignerKind::Nearest,
            AlignerKind::Deconv,
            AlignerKind::UpsampleModule,
            AlignerKind::Ifa,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            AlignerKind::Bilinear => "bilinear",
            AlignerKind::Nearest => "nearest",
            AlignerKind::Deconv => "deconv",
            AlignerKind::UpsampleModule => "upsample-module",
            AlignerKind::Ifa => "ifa",
        }
    }
}

impl std::str::FromStr for AlignerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::all()
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown aligner kind: {s}"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncConfig {
    /// [stem, stage2, stage3, stage4, stage5] channel widths.
    pub widths: Vec<usize>,
    /// Convolution blocks per stage.
    pub blocks: usize,
    /// Extra 2x average pools after stage 1; network stride becomes 32 * 2^k.
    pub extra_pool: usize,
}

impl Default for EncConfig {
    fn default() -> Self {
        EncConfig { widths: vec![16, 32, 64, 128, 128], blocks: 2, extra_pool: 0 }
    }
}

impl EncConfig {
    pub fn required_multiple(&self) -> usize {
        32 << self.extra_pool
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub kind: AlignerKind,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig { kind: AlignerKind::Ifa }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub levels: Vec<u32>,
    /// Common projected channel dimension D.
    pub proj_dim: usize,
    /// Hidden layer widths of the decoding MLP (input/output derived).
    pub mlp_widths: Vec<usize>,
    pub chunk_size: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            levels: vec![2, 3, 4, 5],
            proj_dim: 64,
            mlp_widths: vec![256, 256],
            chunk_size: 8192,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PeConfig {
    pub mode: PeMode,
    /// Total sine+cosine width over both axes: 4L. Typical sweep
    /// {12..72} maps to L in {3..18}.
    pub total_dim: usize,
    pub learned: bool,
    pub share_across_levels: bool,
}

impl Default for PeConfig {
    fn default() -> Self {
        PeConfig {
            mode: PeMode::SineCosineLearned,
            total_dim: 24,
            learned: true,
            share_across_levels: false,
        }
    }
}

impl PeConfig {
    pub fn freq_count(&self) -> usize {
        self.total_dim / 4
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub max_iter: usize,
    pub batch_size: usize,
    pub aux_weight: f64,
    pub ohem_threshold: f64,
    pub ohem_min_kept_fraction: f64,
    /// Random query coordinates per step for the IFA main loss; baselines
    /// always use the full map.
    pub query_subset: usize,
    pub log_interval: usize,
    pub val_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            power: 0.9,
            max_iter: 2000,
            batch_size: 2,
            aux_weight: 0.4,
            ohem_threshold: 0.7,
            ohem_min_kept_fraction: 1.0 / 16.0,
            query_subset: 4096,
            log_interval: 100,
            val_size: 6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub n_classes: usize,
    pub crop: [usize; 2],
    pub precision: Precision,
    pub enc: EncConfig,
    pub align: AlignConfig,
    pub head: HeadConfig,
    pub pe: PeConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            n_classes: 19,
            crop: [512, 512],
            precision: Precision::default(),
            enc: EncConfig::default(),
            align: AlignConfig::default(),
            head: HeadConfig::default(),
            pe: PeConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale synthetic-task defaults: small enough to train on one core.
    pub fn desk() -> Self {
        let mut cfg = RunConfig {
            n_classes: 5,
            crop: [64, 64],
            ..Default::default()
        };
        cfg.enc.widths = vec![8, 16, 32, 64, 64];
        cfg.head.proj_dim = 32;
        cfg.head.mlp_widths = vec![48, 48];
        cfg.train.query_subset = 1024;
        cfg
    }

    /// A full-scale Cityscapes-style recipe, shipped for documentation;
    /// running it is far outside desk scale.
    pub fn cityscapes_full() -> Self {
        let mut cfg = RunConfig {
            n_classes: 19,
            crop: [769, 769],
            ..Default::default()
        };
        cfg.enc.widths = vec![64, 256, 512, 1024, 2048];
        cfg.head.proj_dim = 256;
        cfg.head.mlp_widths = vec![256, 256];
        cfg.train = TrainConfig {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            power: 0.9,
            max_iter: 18_000,
            batch_size: 16,
            aux_weight: 0.4,
            ohem_threshold: 0.7,
            ohem_min_kept_fraction: 1.0 / 16.0,
            query_subset: 4096,
            log_interval: 100,
            val_size: 0,
        };
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_classes < 2 {
            return Err(bad("n_classes", "need at least 2 classes"));
        }
        if self.crop[0] == 0 || self.crop[1] == 0 {
            return Err(bad("crop", "crop dimensions must be positive"));
        }
        let t = &self.train;
        if t.lr0 <= 0.0 {
            return Err(bad("lr0", format!("must be > 0, got {}", t.lr0)));
        }
        if t.power <= 0.0 {
            return Err(bad("power", format!("must be > 0, got {}", t.power)));
        }
        if t.aux_weight < 0.0 {
            return Err(bad("aux_weight", format!("must be >= 0, got {}", t.aux_weight)));
        }
        if !(t.ohem_threshold > 0.0 && t.ohem_threshold < 1.0) {
            return Err(bad(
                "ohem_threshold",
                format!("must be in (0, 1), got {}", t.ohem_threshold),
            ));
        }
        if !(t.ohem_min_kept_fraction > 0.0 && t.ohem_min_kept_fraction <= 1.0) {
            return Err(bad(
                "ohem_min_kept_fraction",
                format!("must be in (0, 1], got {}", t.ohem_min_kept_fraction),
            ));
        }
        if t.batch_size == 0 {
            return Err(bad("batch_size", "must be >= 1"));
        }
        if self.enc.widths.len() != 5 {
            return Err(bad(
                "enc.widths",
                format!("need [stem, s2, s3, s4, s5], got {} entries", self.enc.widths.len()),
            ));
        }
        if self.enc.blocks == 0 {
            return Err(bad("enc.blocks", "must be >= 1"));
        }
        if self.head.levels.is_empty() || self.head.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("head.levels", "must be non-empty and strictly increasing"));
        }
        if self.head.levels.iter().any(|&l| !(2..=5).contains(&l)) {
            return Err(bad("head.levels", "levels must be within 2..=5"));
        }
        if self.head.proj_dim == 0 {
            return Err(bad("head.proj_dim", "must be >= 1"));
        }
        if self.head.chunk_size == 0 {
            return Err(bad("head.chunk_size", "must be >= 1"));
        }
        if self.pe.total_dim == 0 || self.pe.total_dim % 4 != 0 {
            return Err(bad(
                "pe.total_dim",
                format!("must be a positive multiple of 4, got {}", self.pe.total_dim),
            ));
        }
        if self.pe.learned != self.pe.mode.learned()
            && matches!(
                self.pe.mode,
                PeMode::SineCosineFixed | PeMode::SineCosineLearned
            )
        {
            return Err(bad(
                "pe.learned",
                format!("inconsistent with pe.mode {:?}", self.pe.mode),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::default().validate().unwrap();
        RunConfig::cityscapes_full().validate().unwrap();
    }

    #[test]
    fn negative_lr_names_the_key() {
        let mut cfg = RunConfig::desk();
        cfg.train.lr0 = -1.0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("lr0"), "{err}");
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::desk();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back.head.proj_dim, cfg.head.proj_dim);
        assert_eq!(back.align.kind, cfg.align.kind);
    }
}
