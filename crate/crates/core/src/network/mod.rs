//! Network configuration: the mixed 2D/3D level schedule, attention modes,
//! and the prediction/attention result types.

pub mod attention;
pub mod checkpoint;
pub mod receptive;
pub mod unet;

pub use receptive::{receptive_field, receptive_field_voxels};
pub use unet::Network;

use crate::error::{Error, Result};
use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

/// Convolution/pooling dimensionality of one level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dim {
    #[serde(rename = "2d")]
    Two,
    #[serde(rename = "3d")]
    Three,
}

impl Dim {
    /// Kernel extents (depth, height, width); 2D levels never convolve
    /// along depth.
    pub fn kernel(self) -> [usize; 3] {
        match self {
            Dim::Two => [1, 3, 3],
            Dim::Three => [3, 3, 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSpec {
    pub dim: Dim,
    pub channels: usize,
}

/// Ordered per-level dimensionality and channel counts plus the pool factors
/// applied between consecutive levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSchedule {
    pub levels: Vec<LevelSpec>,
    /// pool_factors[i] downsamples between level i+1 and level i+2.
    pub pool_factors: Vec<[usize; 3]>,
}

impl LayerSchedule {
    /// The five-level mixed schedule: L1-L2 2D, L3-L5 3D, channels 16*l.
    pub fn default_2p5d() -> Self {
        LayerSchedule {
            levels: vec![
                LevelSpec { dim: Dim::Two, channels: 16 },
                LevelSpec { dim: Dim::Two, channels: 32 },
                LevelSpec { dim: Dim::Three, channels: 48 },
                LevelSpec { dim: Dim::Three, channels: 64 },
                LevelSpec { dim: Dim::Three, channels: 80 },
            ],
            pool_factors: vec![[1, 2, 2], [1, 2, 2], [2, 2, 2], [2, 2, 2]],
        }
    }

    /// All-2D counterpart: same channels, in-plane pooling only.
    pub fn default_2d() -> Self {
        let mut s = Self::default_2p5d();
        for l in &mut s.levels {
            l.dim = Dim::Two;
        }
        s.pool_factors = vec![[1, 2, 2]; 4];
        s
    }

    /// All-3D counterpart: same channels, isotropic pooling.
    pub fn default_3d() -> Self {
        let mut s = Self::default_2p5d();
        for l in &mut s.levels {
            l.dim = Dim::Three;
        }
        s.pool_factors = vec![[2, 2, 2]; 4];
        s
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// Cumulative pool factor in effect at each level; the first entry is
    /// (1,1,1).
    pub fn cumulative_pool_factors(&self) -> Vec<[usize; 3]> {
        let mut cum = [1usize; 3];
        let mut out = vec![cum];
        for f in &self.pool_factors {
            for a in 0..3 {
                cum[a] *= f[a];
            }
            out.push(cum);
        }
        out
    }

    /// Total downsampling factor at the deepest level; input extents must be
    /// divisible by this.
    pub fn required_divisor(&self) -> [usize; 3] {
        *self.cumulative_pool_factors().last().expect("non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("schedule needs at least one level".into()));
        }
        if self.pool_factors.len() + 1 != self.levels.len() {
            return Err(Error::Config(format!(
                "{} levels require {} pool factors, got {}",
                self.levels.len(),
                self.levels.len() - 1,
                self.pool_factors.len()
            )));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.channels == 0 {
                return Err(Error::Config(format!("level {} has zero channels", i + 1)));
            }
        }
        for (i, f) in self.pool_factors.iter().enumerate() {
            if f.iter().any(|&x| x == 0) {
                return Err(Error::Config(format!("zero pool factor after level {}", i + 1)));
            }
            if self.levels[i].dim == Dim::Two && f[0] != 1 {
                return Err(Error::Config(format!(
                    "2D level {} must not pool along depth (factor {:?})",
                    i + 1,
                    f
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
    #[serde(rename = "2.5d")]
    TwoPointFiveD,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum AttentionMode {
    #[serde(rename = "none")]
    #[default]
    None,
    #[serde(rename = "pa")]
    PA,
    /// Same graph as PA; the difference is the supervised attention loss.
    #[serde(rename = "spvpa")]
    SpvPA,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum UpsampleMode {
    #[serde(rename = "transposed-conv")]
    #[default]
    TransposedConv,
    #[serde(rename = "nearest+conv")]
    NearestConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "default_variant")]
    pub variant: Variant,
    /// Explicit schedule; when absent the variant's default is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<LayerSchedule>,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    #[serde(default)]
    pub attention_mode: AttentionMode,
    #[serde(default)]
    pub upsample_mode: UpsampleMode,
}

fn default_variant() -> Variant {
    Variant::TwoPointFiveD
}
fn default_classes() -> usize {
    2
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            variant: Variant::TwoPointFiveD,
            schedule: None,
            n_classes: 2,
            attention_mode: AttentionMode::None,
            upsample_mode: UpsampleMode::TransposedConv,
        }
    }
}

impl NetworkConfig {
    pub fn with_variant(variant: Variant) -> Self {
        NetworkConfig {
            variant,
            ..Default::default()
        }
    }

    pub fn resolved_schedule(&self) -> LayerSchedule {
        self.schedule.clone().unwrap_or_else(|| match self.variant {
            Variant::TwoD => LayerSchedule::default_2d(),
            Variant::ThreeD => LayerSchedule::default_3d(),
            Variant::TwoPointFiveD => LayerSchedule::default_2p5d(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "n_classes must be >= 2, got {}",
                self.n_classes
            )));
        }
        let schedule = self.resolved_schedule();
        schedule.validate()?;
        match self.variant {
            Variant::TwoD => {
                if schedule.levels.iter().any(|l| l.dim != Dim::Two) {
                    return Err(Error::Config("2d variant requires all levels 2D".into()));
                }
            }
            Variant::ThreeD => {
                if schedule.levels.iter().any(|l| l.dim != Dim::Three) {
                    return Err(Error::Config("3d variant requires all levels 3D".into()));
                }
                if schedule.pool_factors.iter().any(|f| *f != [2, 2, 2]) {
                    return Err(Error::Config(
                        "3d variant requires (2,2,2) pool factors".into(),
                    ));
                }
            }
            Variant::TwoPointFiveD => {
                let first_3d = schedule
                    .levels
                    .iter()
                    .position(|l| l.dim == Dim::Three)
                    .ok_or_else(|| {
                        Error::Config("2.5d variant needs at least one 3D level".into())
                    })?;
                if first_3d == 0 {
                    return Err(Error::Config(
                        "2.5d variant needs at least one leading 2D level".into(),
                    ));
                }
                if schedule.levels[first_3d..].iter().any(|l| l.dim != Dim::Three) {
                    return Err(Error::Config(
                        "2.5d variant must be 2D levels followed by 3D levels".into(),
                    ));
                }
            }
        }
        if self.attention_mode != AttentionMode::None {
            // the bottleneck attention module halves the deepest channel count
            let last = schedule.levels.last().expect("non-empty").channels;
            if last % 2 != 0 {
                return Err(Error::Config(format!(
                    "attention requires an even channel count at the deepest level, got {last}"
                )));
            }
        }
        Ok(())
    }
}

/// Single-channel spatial attention map at one resolution level; entries are
/// sigmoid outputs in [0, 1].
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub values: Array3<f32>,
    /// 1-based level index.
    pub level: usize,
}

/// Network output for one case: per-voxel class probabilities plus the
/// attention maps (empty when attention is disabled).
#[derive(Debug, Clone)]
pub struct Prediction {
    /// (class, depth, height, width); channels sum to 1 per voxel.
    pub probs: Array4<f32>,
    pub attentions: Vec<AttentionMap>,
}

impl Prediction {
    /// Argmax segmentation as a binary foreground mask (class 1).
    pub fn argmax_foreground(&self) -> Array3<u8> {
        let s = self.probs.shape();
        let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = Array3::<u8>::zeros((d, h, w));
        for dd in 0..d {
            for hh in 0..h {
                for ww in 0..w {
                    let mut best = 0usize;
                    let mut best_v = self.probs[[0, dd, hh, ww]];
                    for cc in 1..c {
                        let v = self.probs[[cc, dd, hh, ww]];
                        if v > best_v {
                            best_v = v;
                            best = cc;
                        }
                    }
                    out[[dd, hh, ww]] = u8::from(best == 1);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_channel_schedule_is_16l() {
        let s = LayerSchedule::default_2p5d();
        let channels: Vec<usize> = s.levels.iter().map(|l| l.channels).collect();
        assert_eq!(channels, vec![16, 32, 48, 64, 80]);
        assert_eq!(s.pool_factors, vec![[1, 2, 2], [1, 2, 2], [2, 2, 2], [2, 2, 2]]);
        assert_eq!(s.levels[0].dim, Dim::Two);
        assert_eq!(s.levels[1].dim, Dim::Two);
        for l in &s.levels[2..] {
            assert_eq!(l.dim, Dim::Three);
        }
    }

    #[test]
    fn cumulative_factors() {
        let s = LayerSchedule::default_2p5d();
        assert_eq!(
            s.cumulative_pool_factors(),
            vec![[1, 1, 1], [1, 2, 2], [1, 4, 4], [2, 8, 8], [4, 16, 16]]
        );
        assert_eq!(s.required_divisor(), [4, 16, 16]);
    }

    #[test]
    fn variant_consistency_enforced() {
        let bad = NetworkConfig {
            variant: Variant::TwoD,
            schedule: Some(LayerSchedule::default_2p5d()),
            ..Default::default()
        };
        assert!(bad.validate().is_err());

        let ok = NetworkConfig::with_variant(Variant::ThreeD);
        ok.validate().unwrap();
    }

    #[test]
    fn depth_pool_after_2d_level_rejected() {
        let mut s = LayerSchedule::default_2p5d();
        s.pool_factors[0] = [2, 2, 2];
        assert!(s.validate().is_err());
    }

    #[test]
    fn serde_names_round_trip() {
        let cfg = NetworkConfig {
            variant: Variant::TwoPointFiveD,
            attention_mode: AttentionMode::SpvPA,
            upsample_mode: UpsampleMode::NearestConv,
            ..Default::default()
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"2.5d\""), "{s}");
        assert!(s.contains("\"spvpa\""));
        assert!(s.contains("\"nearest+conv\""));
        let back: NetworkConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
    }
}
