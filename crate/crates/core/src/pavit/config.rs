use serde::{Deserialize, Serialize};

use crate::datamodel::MeasureKind;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_side: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// `seeded:<n>` for a deterministic random backbone, or
    /// `safetensors:<path>` for externally supplied weights.
    pub source: String,
    pub frozen: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_side: 224,
            patch_size: 16,
            depth: 12,
            dim: 768,
            heads: 12,
            mlp_ratio: 4,
            source: "seeded:0".into(),
            frozen: true,
        }
    }
}

impl BackboneConfig {
    pub fn grid(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_side % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_side {} is not divisible by patch_size {}",
                self.image_side, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} is not divisible by heads {}", self.dim, self.heads)));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("depth and mlp_ratio must be positive".into()));
        }
        if !self.frozen {
            return Err(Error::Config("the backbone is always frozen".into()));
        }
        BackboneSource::parse(&self.source)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BackboneSource {
    Seeded(u64),
    Safetensors(String),
}

impl BackboneSource {
    pub fn parse(tag: &str) -> Result<Self> {
        if let Some(n) = tag.strip_prefix("seeded:") {
            n.parse()
                .map(BackboneSource::Seeded)
                .map_err(|_| Error::Config(format!("bad backbone seed in {tag:?}")))
        } else if let Some(p) = tag.strip_prefix("safetensors:") {
            Ok(BackboneSource::Safetensors(p.to_string()))
        } else {
            Err(Error::Config(format!("unknown backbone source {tag:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PtmConfig {
    pub channels: Vec<usize>,
    pub in_channels: usize,
}

impl Default for PtmConfig {
    fn default() -> Self {
        Self {
            channels: vec![48, 96, 192, 384, 768],
            in_channels: 6,
        }
    }
}

pub const PTM_STAGES: usize = 5;
pub const PTM_GRID: usize = 7;

impl PtmConfig {
    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    /// Spatial side after each stage, plus the final adaptive pooling factor.
    pub fn trace(&self, side: usize) -> Result<(Vec<usize>, usize)> {
        let unit = PTM_GRID << PTM_STAGES;
        if side == 0 || side % unit != 0 {
            return Err(Error::Config(format!(
                "texture encoder needs a side that is a multiple of {unit} (7 * 2^5) so the final grid is 7x7; got {side}"
            )));
        }
        let trace: Vec<usize> = (0..=PTM_STAGES).map(|i| side >> i).collect();
        Ok((trace, side / unit))
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != PTM_STAGES || self.channels.contains(&0) {
            return Err(Error::Config(format!(
                "texture encoder needs {PTM_STAGES} positive stage widths, got {:?}",
                self.channels
            )));
        }
        if self.in_channels != 6 {
            return Err(Error::Config("texture encoder input is RGB plus 3 texture channels".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub ptm: PtmConfig,
    pub rho_l: f64,
    pub rho_h: f64,
    /// Multiplier on the band-pass texture channels.
    pub texture_gain: f64,
    pub precision: Precision,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            ptm: PtmConfig::default(),
            rho_l: 0.0576,
            rho_h: 0.0036,
            texture_gain: 10.0,
            precision: Precision::F32,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self::default()
    }

    /// CPU-scale profile: D=64, L=4, D'=64 with a proportionally scaled
    /// channel ladder and 32px backbone patches.
    pub fn toy() -> Self {
        Self {
            backbone: BackboneConfig {
                patch_size: 32,
                depth: 4,
                dim: 64,
                heads: 4,
                ..Default::default()
            },
            ptm: PtmConfig {
                channels: vec![4, 8, 16, 32, 64],
                in_channels: 6,
            },
            ..Default::default()
        }
    }

    /// Smallest profile, used for finite-difference gradient checks.
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig {
                patch_size: 32,
                depth: 2,
                dim: 16,
                heads: 2,
                mlp_ratio: 2,
                ..Default::default()
            },
            ptm: PtmConfig {
                channels: vec![2, 2, 4, 4, 8],
                in_channels: 6,
            },
            precision: Precision::F64,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.ptm.validate()?;
        self.ptm.trace(self.backbone.image_side)?;
        if !(self.rho_l > self.rho_h && self.rho_h >= 0.0 && self.rho_l <= 1.0) {
            return Err(Error::Config(format!(
                "band-pass needs 0 <= rho_h < rho_l <= 1, got {} / {}",
                self.rho_h, self.rho_l
            )));
        }
        if !self.texture_gain.is_finite() {
            return Err(Error::Config("texture_gain must be finite".into()));
        }
        Ok(())
    }
}

/// Cumulative ablation switches; configs A..E enable them in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureFlags {
    pub use_freq_input: bool,
    pub use_position_adapters: bool,
    /// Geometric augmentation (flips, rotation, erasing, crop).
    pub use_augmentation: bool,
    pub use_symmetric_loss: bool,
    /// Random lighting blends; off in the ablation ladder.
    pub use_lighting_augmentation: bool,
}

impl Default for FeatureFlags {
    fn default() -> Self {
        Self::config('E').expect("E is a valid config")
    }
}

impl FeatureFlags {
    pub fn config(letter: char) -> Result<Self> {
        let level = match letter.to_ascii_uppercase() {
            'A' => 0,
            'B' => 1,
            'C' => 2,
            'D' => 3,
            'E' => 4,
            _ => return Err(Error::Config(format!("unknown ablation config {letter:?}"))),
        };
        Ok(Self {
            use_freq_input: level >= 1,
            use_position_adapters: level >= 2,
            use_augmentation: level >= 3,
            use_symmetric_loss: level >= 4,
            use_lighting_augmentation: false,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub tau: f64,
    pub kind: MeasureKind,
    /// Label range mapped to [0, 1]; defaults to the kind's display domain.
    pub label_range: Option<(f64, f64)>,
    pub loss_weights: (f64, f64),
    pub flags: FeatureFlags,
    pub seed: u64,
    /// Seed for augmentation sampling; falls back to `seed`.
    pub augment_seed: Option<u64>,
    /// Evaluate on the validation split every this many epochs (0 = only at the end).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            epochs: 50,
            batch: 16,
            tau: 0.1,
            kind: MeasureKind::Tewl,
            label_range: None,
            loss_weights: (1.0, 1.0),
            flags: FeatureFlags::default(),
            seed: 0,
            augment_seed: None,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    /// Settings used with the toy model profile.
    pub fn toy() -> Self {
        Self {
            lr: 2e-3,
            epochs: 12,
            ..Default::default()
        }
    }

    pub fn label_range(&self) -> (f64, f64) {
        self.label_range.unwrap_or_else(|| self.kind.default_range())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.batch < 2 || self.batch % 2 != 0 {
            return Err(Error::Config(format!("batch must be even and >= 2, got {}", self.batch)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        let (lo, hi) = self.label_range();
        if !(lo < hi) {
            return Err(Error::Config(format!("empty label range ({lo}, {hi})")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ptm_trace_for_standard_side() {
        let (trace, pool) = PtmConfig::default().trace(224).unwrap();
        assert_eq!(trace, vec![224, 112, 56, 28, 14, 7]);
        assert_eq!(pool, 1);
        assert_eq!(PtmConfig::default().trace(448).unwrap().1, 2);
    }

    #[test]
    fn ptm_rejects_small_side() {
        assert!(matches!(PtmConfig::default().trace(32), Err(Error::Config(_))));
        assert!(PtmConfig::default().trace(96).is_err());
    }

    #[test]
    fn profiles_validate() {
        ModelConfig::paper().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::paper().backbone.num_patches(), 196);
    }

    #[test]
    fn backbone_constraints() {
        let mut b = BackboneConfig::default();
        b.patch_size = 15;
        assert!(b.validate().is_err());
        let mut b = BackboneConfig::default();
        b.heads = 5;
        assert!(b.validate().is_err());
        let mut b = BackboneConfig::default();
        b.frozen = false;
        assert!(b.validate().is_err());
        assert!(BackboneSource::parse("hub:vit").is_err());
    }

    #[test]
    fn ladder_flags_are_cumulative() {
        let a = FeatureFlags::config('A').unwrap();
        assert!(!a.use_freq_input && !a.use_position_adapters);
        let e = FeatureFlags::config('e').unwrap();
        assert!(e.use_freq_input && e.use_position_adapters && e.use_augmentation && e.use_symmetric_loss);
        assert!(FeatureFlags::config('F').is_err());
    }

    #[test]
    fn train_config_checks() {
        let mut t = TrainConfig::default();
        t.batch = 7;
        assert!(t.validate().is_err());
        let mut t = TrainConfig::default();
        t.tau = 0.0;
        assert!(t.validate().is_err());
        assert_eq!(TrainConfig::default().label_range(), (0.0, 30.0));
    }
}
