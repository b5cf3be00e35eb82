//! Physical receptive-field calculator. Tracks the standard (rf, jump)
//! recurrence per axis through the encoder and converts voxel extents to
//! millimetres with the volume spacing, which is the quantity the mixed
//! 2D/3D schedule is designed to balance.

use crate::error::Result;
use crate::network::NetworkConfig;

/// Receptive field and effective stride along one axis, in input voxels.
#[derive(Debug, Clone, Copy)]
pub struct RfState {
    pub rf: usize,
    pub jump: usize,
}

impl RfState {
    pub fn new() -> Self {
        RfState { rf: 1, jump: 1 }
    }

    /// Stride-1 convolution with kernel extent `k`.
    pub fn conv(&mut self, k: usize) {
        self.rf += (k - 1) * self.jump;
    }

    /// Non-overlapping pooling with window and stride `f`.
    pub fn pool(&mut self, f: usize) {
        self.rf += (f - 1) * self.jump;
        self.jump *= f;
    }
}

impl Default for RfState {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-level receptive field at each encoder block output, in input voxels.
pub fn receptive_field_voxels(config: &NetworkConfig) -> Result<Vec<[usize; 3]>> {
    config.validate()?;
    let schedule = config.resolved_schedule();
    let mut state = [RfState::new(), RfState::new(), RfState::new()];
    let mut out = Vec::with_capacity(schedule.levels.len());
    for (i, level) in schedule.levels.iter().enumerate() {
        let k = level.dim.kernel();
        // two convolutions per block
        for _ in 0..2 {
            for a in 0..3 {
                state[a].conv(k[a]);
            }
        }
        out.push([state[0].rf, state[1].rf, state[2].rf]);
        if i < schedule.pool_factors.len() {
            let f = schedule.pool_factors[i];
            for a in 0..3 {
                state[a].pool(f[a]);
            }
        }
    }
    Ok(out)
}

/// Per-level per-axis physical receptive field in millimetres.
pub fn receptive_field(config: &NetworkConfig, spacing_mm: [f64; 3]) -> Result<Vec<[f64; 3]>> {
    if spacing_mm.iter().any(|&s| !(s > 0.0)) {
        return Err(crate::error::Error::Config(format!(
            "spacing must be positive, got {spacing_mm:?}"
        )));
    }
    Ok(receptive_field_voxels(config)?
        .into_iter()
        .map(|v| {
            [
                v[0] as f64 * spacing_mm[0],
                v[1] as f64 * spacing_mm[1],
                v[2] as f64 * spacing_mm[2],
            ]
        })
        .collect())
}
