//! Anisotropic volumetric segmentation toolkit: a mixed 2D/3D attention
//! encoder-decoder, a voxel-level hardness-weighted Dice loss with verified
//! gradients, surface-distance evaluation metrics, and a deterministic
//! synthetic benchmark harness.

pub mod caseio;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
pub use losses::{HdlConfig, PooledTargets};
pub use network::{
    AttentionMap, AttentionMode, LayerSchedule, Network, NetworkConfig, Prediction, Variant,
};
pub use synth::SyntheticSpec;
pub use volume::{LabelVolume, SegmentationTarget, Volume};
