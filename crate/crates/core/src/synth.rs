//! Deterministic synthetic anisotropic-volume generator: a low-contrast
//! ellipsoidal target plus thin curved distractor sheets and Gaussian noise.

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume};
use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Inclusive range pair in millimetres.
pub type RangeMm = [f64; 2];

/// Parameters of one synthetic case. Same seed + same spec produces
/// bit-identical output.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default)]
    pub seed: u64,
    /// Voxel extents (depth, height, width).
    #[serde(default = "default_shape")]
    pub shape: [usize; 3],
    /// Per-axis voxel size in mm (depth, height, width).
    #[serde(default = "default_spacing")]
    pub spacing_mm: [f64; 3],
    /// Per-axis sampling ranges for the target ellipsoid radii, mm.
    #[serde(default = "default_radii")]
    pub ellipsoid_radii_mm: [RangeMm; 3],
    /// Intensity offset of the foreground over the zero background.
    #[serde(default = "default_contrast")]
    pub contrast_delta: f64,
    /// Standard deviation of the additive i.i.d. Gaussian noise.
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    /// Number of bright thin curved distractor sheets.
    #[serde(default = "default_n_edges")]
    pub n_distractor_edges: usize,
    /// Intensity added on distractor sheet voxels.
    #[serde(default = "default_edge_intensity")]
    pub edge_intensity: f64,
}

fn default_shape() -> [usize; 3] {
    [32, 128, 128]
}
fn default_spacing() -> [f64; 3] {
    [1.5, 0.4, 0.4]
}
fn default_radii() -> [RangeMm; 3] {
    [[4.0, 8.0], [5.0, 10.0], [5.0, 10.0]]
}
fn default_contrast() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    0.5
}
fn default_n_edges() -> usize {
    6
}
fn default_edge_intensity() -> f64 {
    1.0
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            shape: default_shape(),
            spacing_mm: default_spacing(),
            ellipsoid_radii_mm: default_radii(),
            contrast_delta: default_contrast(),
            noise_sigma: default_noise(),
            n_distractor_edges: default_n_edges(),
            edge_intensity: default_edge_intensity(),
        }
    }
}

/// Margin (in voxels, per axis, each side) the target must keep to the border.
const FIT_MARGIN_VOXELS: f64 = 2.0;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidSpec("shape extents must be >= 1".into()));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidSpec("spacing must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidSpec("noise_sigma must be >= 0".into()));
        }
        if !self.contrast_delta.is_finite() || !self.edge_intensity.is_finite() {
            return Err(Error::InvalidSpec(
                "contrast_delta and edge_intensity must be finite".into(),
            ));
        }
        for (axis, r) in self.ellipsoid_radii_mm.iter().enumerate() {
            if !(r[0] > 0.0) || r[1] < r[0] {
                return Err(Error::InvalidSpec(format!(
                    "radius range on axis {axis} must satisfy 0 < lo <= hi, got {r:?}"
                )));
            }
            // feasibility for the largest radius: center interval must be nonempty
            let n = self.shape[axis] as f64;
            let s = self.spacing_mm[axis];
            let lo = FIT_MARGIN_VOXELS * s + r[1];
            let hi = (n - 1.0 - FIT_MARGIN_VOXELS) * s - r[1];
            if hi < lo {
                return Err(Error::InvalidSpec(format!(
                    "ellipsoid with radius {} mm cannot fit axis {axis} ({} voxels at {} mm) with a {}-voxel margin",
                    r[1], self.shape[axis], s, FIT_MARGIN_VOXELS
                )));
            }
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn quad(&self, x: [f64; 3]) -> f64 {
        let mut q = 0.0;
        for a in 0..3 {
            let t = (x[a] - self.center[a]) / self.radii[a];
            q += t * t;
        }
        q
    }
}

/// Generates one case: the rasterized ellipsoid label (voxel center inside
/// => 1) and the image volume. The ellipsoid parameters are drawn first, so
/// the label depends only on (seed, shape, spacing, radii ranges).
pub fn generate_case(spec: &SyntheticSpec) -> Result<(Volume, LabelVolume)> {
    spec.validate()?;
    let [nd, nh, nw] = spec.shape;
    let sp = spec.spacing_mm;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut radii = [0.0f64; 3];
    for a in 0..3 {
        let [lo, hi] = spec.ellipsoid_radii_mm[a];
        radii[a] = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    }
    let mut center = [0.0f64; 3];
    for a in 0..3 {
        let lo = FIT_MARGIN_VOXELS * sp[a] + radii[a];
        let hi = (spec.shape[a] as f64 - 1.0 - FIT_MARGIN_VOXELS) * sp[a] - radii[a];
        center[a] = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    }
    let target = Ellipsoid { center, radii };

    // label: voxel-center containment
    let mut label = Array3::<u8>::zeros((nd, nh, nw));
    for d in 0..nd {
        let zd = d as f64 * sp[0];
        for h in 0..nh {
            let yh = h as f64 * sp[1];
            for w in 0..nw {
                let xw = w as f64 * sp[2];
                if target.quad([zd, yh, xw]) <= 1.0 {
                    label[[d, h, w]] = 1;
                }
            }
        }
    }

    let mut image = Array3::<f32>::zeros((nd, nh, nw));
    let delta = spec.contrast_delta as f32;
    ndarray::Zip::from(&mut image).and(&label).for_each(|v, &l| {
        if l == 1 {
            *v = delta;
        }
    });

    // distractor sheets: thin shells of random ellipsoids, kept clear of the
    // target by a fixed physical margin
    let extent = [
        (nd as f64 - 1.0) * sp[0],
        (nh as f64 - 1.0) * sp[1],
        (nw as f64 - 1.0) * sp[2],
    ];
    let min_extent = extent.iter().cloned().fold(f64::INFINITY, f64::min);
    let exclusion = Ellipsoid {
        center,
        radii: [radii[0] + 1.2, radii[1] + 1.2, radii[2] + 1.2],
    };
    for _ in 0..spec.n_distractor_edges {
        let mut ec = [0.0f64; 3];
        for a in 0..3 {
            ec[a] = rng.gen_range(0.0..extent[a]);
        }
        let mut er = [0.0f64; 3];
        for a in 0..3 {
            er[a] = rng.gen_range(0.15 * min_extent..0.45 * min_extent);
        }
        let shell = Ellipsoid {
            center: ec,
            radii: er,
        };
        let r_gm = (er[0] * er[1] * er[2]).powf(1.0 / 3.0);
        let band = sp.iter().cloned().fold(f64::INFINITY, f64::min) / r_gm;
        let gain = spec.edge_intensity as f32;
        for d in 0..nd {
            let zd = d as f64 * sp[0];
            for h in 0..nh {
                let yh = h as f64 * sp[1];
                for w in 0..nw {
                    let xw = w as f64 * sp[2];
                    let q = shell.quad([zd, yh, xw]);
                    if (q.sqrt() - 1.0).abs() <= band && exclusion.quad([zd, yh, xw]) > 1.0 {
                        image[[d, h, w]] += gain;
                    }
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let sigma = spec.noise_sigma as f32;
        for v in image.iter_mut() {
            let z: f32 = StandardNormal.sample(&mut rng);
            *v += sigma * z;
        }
    }

    let id = format!("case_{:08}", spec.seed);
    let volume = Volume::new(image, sp, id)?;
    let label = LabelVolume::new(label, sp)?;
    Ok((volume, label))
}
