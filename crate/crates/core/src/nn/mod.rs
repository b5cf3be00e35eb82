//! Minimal CPU neural-network kernels used by the segmentation networks:
//! convolutions via im2col + sgemm, batch norm, pReLU, max pooling,
//! transposed-convolution upsampling, softmax, and Adam.
//!
//! All kernels are deterministic: parallel work is split into fixed
//! partitions and reductions are summed in partition order, so repeated runs
//! produce bit-identical results regardless of thread scheduling.

pub mod adam;
pub mod conv;
pub mod gemm;
pub mod layers;

use ndarray::{Array5, ArrayD};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Feature tensor layout: (batch, channel, depth, height, width).
pub type Tensor = Array5<f32>;

/// Number of fixed partitions for parallel gradient accumulation. The value
/// only affects scheduling; results are identical for any choice.
pub(crate) const GRAD_GROUPS: usize = 4;

/// A learnable array with its gradient and Adam state.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub data: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    pub m: ArrayD<f32>,
    pub v: ArrayD<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, data: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(data.raw_dim());
        let m = ArrayD::zeros(data.raw_dim());
        let v = ArrayD::zeros(data.raw_dim());
        Param {
            name: name.into(),
            data,
            grad,
            m,
            v,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, ArrayD::zeros(ndarray::IxDyn(shape)))
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], value: f32) -> Self {
        Self::new(name, ArrayD::from_elem(ndarray::IxDyn(shape), value))
    }

    /// Fan-in-scaled normal initialization (std = sqrt(2 / fan_in)).
    pub fn he_normal(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| dist.sample(rng) as f32).collect();
        Self::new(
            name,
            ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).expect("shape matches"),
        )
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn grad_slice_mut(&mut self) -> &mut [f32] {
        self.grad.as_slice_mut().expect("standard layout")
    }

    pub fn data_slice(&self) -> &[f32] {
        self.data.as_slice().expect("standard layout")
    }
}

/// Seeded parameter-name scoping helper so every layer gets a unique,
/// stable parameter name.
pub(crate) fn scoped(scope: &str, leaf: &str) -> String {
    if scope.is_empty() {
        leaf.to_string()
    } else {
        format!("{scope}.{leaf}")
    }
}

/// Raw mutable pointer wrapper for writing provably disjoint regions from
/// parallel tasks.
#[derive(Clone, Copy)]
pub(crate) struct SendMutPtr(pub *mut f32);
unsafe impl Send for SendMutPtr {}
unsafe impl Sync for SendMutPtr {}

/// Splits `0..n` into at most `parts` contiguous ranges of near-equal size.
pub(crate) fn partition_ranges(n: usize, parts: usize) -> Vec<(usize, usize)> {
    if n == 0 {
        return Vec::new();
    }
    let parts = parts.clamp(1, n);
    let base = n / parts;
    let rem = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < rem);
        out.push((start, start + len));
        start += len;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn partitions_cover_range() {
        for n in [1usize, 2, 5, 17, 64] {
            for parts in [1usize, 2, 4, 9] {
                let r = partition_ranges(n, parts);
                assert_eq!(r[0].0, 0);
                assert_eq!(r.last().unwrap().1, n);
                for w in r.windows(2) {
                    assert_eq!(w[0].1, w[1].0);
                }
            }
        }
    }

    #[test]
    fn he_init_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let a = Param::he_normal("a", &[4, 3, 3], 27, &mut r1);
        let b = Param::he_normal("a", &[4, 3, 3], 27, &mut r2);
        assert_eq!(a.data, b.data);
    }
}
