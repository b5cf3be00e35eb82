//! Anisotropic volume data model: scalar volumes with per-axis physical
//! spacing, binary label volumes, and one-hot segmentation targets.

use crate::error::{Error, Result};
use ndarray::{Array3, Array4};

/// A 3D scalar image indexed (depth, height, width) with per-axis voxel
/// spacing in millimetres. The spacing triple is what carries anisotropy.
#[derive(Debug, Clone)]
pub struct Volume {
    pub data: Array3<f32>,
    pub spacing_mm: [f64; 3],
    pub id: String,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing_mm: [f64; 3], id: impl Into<String>) -> Result<Self> {
        if data.shape().iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch(format!(
                "volume extents must all be >= 1, got {:?}",
                data.shape()
            )));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "spacing components must be positive, got {:?}",
                spacing_mm
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput(
                "volume contains non-finite values".into(),
            ));
        }
        Ok(Volume {
            data,
            spacing_mm,
            id: id.into(),
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }
}

/// Binary foreground mask paired with a [`Volume`]. Values are exactly 0 or 1.
#[derive(Debug, Clone)]
pub struct LabelVolume {
    pub data: Array3<u8>,
    pub spacing_mm: [f64; 3],
}

impl LabelVolume {
    pub fn new(data: Array3<u8>, spacing_mm: [f64; 3]) -> Result<Self> {
        if data.iter().any(|&v| v > 1) {
            return Err(Error::DegenerateInput(
                "label values must be exactly 0 or 1".into(),
            ));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidSpec(format!(
                "label spacing must be positive, got {:?}",
                spacing_mm
            )));
        }
        Ok(LabelVolume { data, spacing_mm })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Checks shape and spacing against the paired volume.
    pub fn matches(&self, volume: &Volume) -> Result<()> {
        if self.data.shape() != volume.data.shape() {
            return Err(Error::ShapeMismatch(format!(
                "label shape {:?} != volume shape {:?}",
                self.data.shape(),
                volume.data.shape()
            )));
        }
        if self.spacing_mm != volume.spacing_mm {
            return Err(Error::ShapeMismatch(format!(
                "label spacing {:?} != volume spacing {:?}",
                self.spacing_mm, volume.spacing_mm
            )));
        }
        Ok(())
    }
}

/// One-hot ground truth over C=2 classes (channel 0 background, channel 1
/// foreground) together with the originating foreground mask.
#[derive(Debug, Clone)]
pub struct SegmentationTarget {
    /// (class, depth, height, width); every voxel's channels sum to exactly 1.
    pub onehot: Array4<f32>,
    pub foreground: LabelVolume,
}

impl SegmentationTarget {
    pub fn from_label(label: &LabelVolume) -> Self {
        let [d, h, w] = label.shape();
        let mut onehot = Array4::<f32>::zeros((2, d, h, w));
        {
            let (mut bg, mut fg) = onehot.multi_slice_mut((ndarray::s![0, .., .., ..], ndarray::s![1, .., .., ..]));
            for ((b, f), &l) in bg.iter_mut().zip(fg.iter_mut()).zip(label.data.iter()) {
                if l == 1 {
                    *f = 1.0;
                } else {
                    *b = 1.0;
                }
            }
        }
        SegmentationTarget {
            onehot,
            foreground: label.clone(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.onehot.shape()[0]
    }
}

/// Standardizes a volume to zero mean and unit (population) standard
/// deviation, computed in f64. Shape and spacing are unchanged.
pub fn normalize(volume: &Volume) -> Result<Volume> {
    let n = volume.data.len();
    if n < 2 {
        return Err(Error::DegenerateInput(
            "normalize needs at least 2 voxels".into(),
        ));
    }
    let mut sum = 0.0f64;
    let mut sumsq = 0.0f64;
    for &v in volume.data.iter() {
        let v = v as f64;
        sum += v;
        sumsq += v * v;
    }
    let mean = sum / n as f64;
    let var = (sumsq / n as f64 - mean * mean).max(0.0);
    if var == 0.0 {
        return Err(Error::DegenerateInput(
            "constant-intensity volume cannot be normalized".into(),
        ));
    }
    let inv_std = 1.0 / var.sqrt();
    let data = volume.data.mapv(|v| ((v as f64 - mean) * inv_std) as f32);
    Volume::new(data, volume.spacing_mm, volume.id.clone())
}

/// Depth-axis resampling used to feed near-isotropic input to the all-3D
/// variant. `linear` interpolates between slice centers; `nearest` picks the
/// closest slice. Height/width are untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthInterp {
    Nearest,
    Linear,
}

pub fn resample_depth(volume: &Volume, new_depth: usize, interp: DepthInterp) -> Result<Volume> {
    let [d, h, w] = volume.shape();
    if new_depth == 0 {
        return Err(Error::InvalidArgument("new depth must be >= 1".into()));
    }
    let scale = d as f64 / new_depth as f64;
    let mut out = Array3::<f32>::zeros((new_depth, h, w));
    for zd in 0..new_depth {
        // align voxel centers: source coordinate of the new slice center
        let src = (zd as f64 + 0.5) * scale - 0.5;
        match interp {
            DepthInterp::Nearest => {
                let z = src.round().clamp(0.0, (d - 1) as f64) as usize;
                out.index_axis_mut(ndarray::Axis(0), zd)
                    .assign(&volume.data.index_axis(ndarray::Axis(0), z));
            }
            DepthInterp::Linear => {
                let z0f = src.floor();
                let z0 = z0f.clamp(0.0, (d - 1) as f64) as usize;
                let z1 = (z0 + 1).min(d - 1);
                let t = (src - z0f).clamp(0.0, 1.0) as f32;
                let s0 = volume.data.index_axis(ndarray::Axis(0), z0);
                let s1 = volume.data.index_axis(ndarray::Axis(0), z1);
                let mut dst = out.index_axis_mut(ndarray::Axis(0), zd);
                ndarray::Zip::from(&mut dst)
                    .and(&s0)
                    .and(&s1)
                    .for_each(|o, &a, &b| *o = a * (1.0 - t) + b * t);
            }
        }
    }
    let new_spacing = [
        volume.spacing_mm[0] * d as f64 / new_depth as f64,
        volume.spacing_mm[1],
        volume.spacing_mm[2],
    ];
    Volume::new(out, new_spacing, volume.id.clone())
}

/// Nearest-neighbor depth resampling for labels (values stay binary).
pub fn resample_depth_label(label: &LabelVolume, new_depth: usize) -> Result<LabelVolume> {
    let [d, h, w] = label.shape();
    if new_depth == 0 {
        return Err(Error::InvalidArgument("new depth must be >= 1".into()));
    }
    let scale = d as f64 / new_depth as f64;
    let mut out = Array3::<u8>::zeros((new_depth, h, w));
    for zd in 0..new_depth {
        let src = (zd as f64 + 0.5) * scale - 0.5;
        let z = src.round().clamp(0.0, (d - 1) as f64) as usize;
        out.index_axis_mut(ndarray::Axis(0), zd)
            .assign(&label.data.index_axis(ndarray::Axis(0), z));
    }
    let new_spacing = [
        label.spacing_mm[0] * d as f64 / new_depth as f64,
        label.spacing_mm[1],
        label.spacing_mm[2],
    ];
    LabelVolume::new(out, new_spacing)
}
