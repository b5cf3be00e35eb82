//! Stride-1 same-padded 3D convolution (odd kernel extents, including
//! extent 1 for 2D levels) and non-overlapping transposed convolution with
//! kernel == stride, both via im2col/col2im and sgemm.

use super::gemm::sgemm_strided;
use super::{partition_ranges, scoped, Param, SendMutPtr, Tensor, GRAD_GROUPS};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::cell::RefCell;

thread_local! {
    static COL_BUF: RefCell<Vec<f32>> = const { RefCell::new(Vec::new()) };
    static TMP_BUF: RefCell<Vec<f32>> = const { RefCell::new(Vec::new()) };
}

/// Target im2col buffer size per task, in f32 elements (~8 MB).
const COL_BUDGET: usize = 2 * 1024 * 1024;

fn with_col_buf<R>(len: usize, f: impl FnOnce(&mut [f32]) -> R) -> R {
    COL_BUF.with(|b| {
        let mut buf = b.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

fn with_tmp_buf<R>(len: usize, f: impl FnOnce(&mut [f32]) -> R) -> R {
    TMP_BUF.with(|b| {
        let mut buf = b.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

/// (sample, output-depth range) work items; regions are disjoint across
/// items, in a fixed order for deterministic accumulation.
fn conv_tasks(n: usize, d: usize, hw: usize, k_rows: usize) -> Vec<(usize, usize, usize)> {
    let slab = (COL_BUDGET / (k_rows * hw).max(1)).clamp(1, d);
    let mut tasks = Vec::new();
    for s in 0..n {
        let mut d0 = 0;
        while d0 < d {
            let d1 = (d0 + slab).min(d);
            tasks.push((s, d0, d1));
            d0 = d1;
        }
    }
    tasks
}

/// Fills the im2col matrix (rows = c_in * kvol, cols = slab voxels) for
/// output depths [d0, d1) of sample `s`. Every element is written, so the
/// buffer needs no prior zeroing.
#[allow(clippy::too_many_arguments)]
fn fill_col(
    x: &[f32],
    col: &mut [f32],
    s: usize,
    c_in: usize,
    dims: [usize; 3],
    kernel: [usize; 3],
    d0: usize,
    d1: usize,
) {
    let [d, h, w] = dims;
    let [kd, kh, kw] = kernel;
    let (pd, ph, pw) = ((kd - 1) / 2, (kh - 1) / 2, (kw - 1) / 2);
    let hw = h * w;
    let dhw = d * hw;
    let v = (d1 - d0) * hw;
    for ci in 0..c_in {
        let xc = &x[(s * c_in + ci) * dhw..(s * c_in + ci + 1) * dhw];
        for od in 0..kd {
            for oh in 0..kh {
                for ow in 0..kw {
                    let row = (((ci * kd + od) * kh + oh) * kw + ow) * v;
                    let shift = ow as isize - pw as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = ((w as isize - shift).max(0) as usize).min(w);
                    for dz in d0..d1 {
                        let base = row + (dz - d0) * hw;
                        let sz = dz as isize + od as isize - pd as isize;
                        if sz < 0 || sz >= d as isize {
                            col[base..base + hw].fill(0.0);
                            continue;
                        }
                        let src_plane = sz as usize * hw;
                        for y in 0..h {
                            let dst = base + y * w;
                            let sy = y as isize + oh as isize - ph as isize;
                            if sy < 0 || sy >= h as isize {
                                col[dst..dst + w].fill(0.0);
                                continue;
                            }
                            let src = src_plane + sy as usize * w;
                            col[dst..dst + lo].fill(0.0);
                            if hi > lo {
                                let s0 = (src as isize + lo as isize + shift) as usize;
                                col[dst + lo..dst + hi]
                                    .copy_from_slice(&xc[s0..s0 + (hi - lo)]);
                            }
                            col[dst + hi..dst + w].fill(0.0);
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 convolution of `x` with a (c_out, c_in*kvol) weight
/// matrix. Shared by the forward pass and, with flipped/transposed weights,
/// by the data-gradient pass.
fn conv_same(
    x: &Tensor,
    w_mat: &[f32],
    bias: Option<&[f32]>,
    c_out: usize,
    kernel: [usize; 3],
) -> Tensor {
    let (n, c_in, d, h, w) = x.dim();
    let kvol = kernel.iter().product::<usize>();
    let k_rows = c_in * kvol;
    let hw = h * w;
    let dhw = d * hw;
    let mut out = Tensor::zeros((n, c_out, d, h, w));
    let out_ptr = SendMutPtr(out.as_slice_mut().expect("standard layout").as_mut_ptr());
    let xs = x.as_slice().expect("standard layout");
    let tasks = conv_tasks(n, d, hw, k_rows);

    tasks.par_iter().for_each(|&(s, d0, d1)| {
        let out_ptr = out_ptr;
        let v = (d1 - d0) * hw;
        with_col_buf(k_rows * v, |col| {
            fill_col(xs, col, s, c_in, [d, h, w], kernel, d0, d1);
            // out[s, :, d0..d1] viewed as (c_out x v) with row stride dhw;
            // slabs overlap as spans but the written positions are disjoint
            let base = s * c_out * dhw + d0 * hw;
            unsafe {
                super::gemm::sgemm_ptr(
                    c_out,
                    k_rows,
                    v,
                    1.0,
                    w_mat,
                    k_rows as isize,
                    1,
                    col,
                    v as isize,
                    1,
                    0.0,
                    out_ptr.0.add(base),
                    dhw as isize,
                    1,
                );
                if let Some(b) = bias {
                    for co in 0..c_out {
                        let bc = b[co];
                        let seg = out_ptr.0.add(base + co * dhw);
                        for i in 0..v {
                            *seg.add(i) += bc;
                        }
                    }
                }
            }
        });
    });
    out
}

/// Convolution layer with same padding and stride 1.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub w: Param,
    pub b: Param,
    pub kernel: [usize; 3],
    pub c_in: usize,
    pub c_out: usize,
    cache_x: Option<Tensor>,
}

impl Conv3d {
    pub fn new(
        scope: &str,
        c_in: usize,
        c_out: usize,
        kernel: [usize; 3],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(kernel.iter().all(|&k| k % 2 == 1), "kernel extents must be odd");
        let kvol: usize = kernel.iter().product();
        let w = Param::he_normal(
            scoped(scope, "w"),
            &[c_out, c_in, kernel[0], kernel[1], kernel[2]],
            c_in * kvol,
            rng,
        );
        let b = Param::zeros(scoped(scope, "b"), &[c_out]);
        Conv3d {
            w,
            b,
            kernel,
            c_in,
            c_out,
            cache_x: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        debug_assert_eq!(x.dim().1, self.c_in);
        if train {
            self.cache_x = Some(x.clone());
        }
        conv_same(
            x,
            self.w.data_slice(),
            Some(self.b.data_slice()),
            self.c_out,
            self.kernel,
        )
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache_x.take().expect("forward(train) before backward");
        let (n, c_in, d, h, w) = x.dim();
        let kvol: usize = self.kernel.iter().product();
        let k_rows = c_in * kvol;
        let hw = h * w;
        let dhw = d * hw;
        let xs = x.as_slice().expect("standard layout");
        let dys = dy.as_slice().expect("standard layout");
        let c_out = self.c_out;

        // dW and db: fixed task partition, partial sums reduced in order
        let tasks = conv_tasks(n, d, hw, k_rows);
        let groups = partition_ranges(tasks.len(), GRAD_GROUPS);
        let partials: Vec<(Vec<f32>, Vec<f32>)> = groups
            .par_iter()
            .map(|&(t0, t1)| {
                let mut dw = vec![0.0f32; c_out * k_rows];
                let mut db = vec![0.0f32; c_out];
                for &(s, d0, d1) in &tasks[t0..t1] {
                    let v = (d1 - d0) * hw;
                    with_col_buf(k_rows * v, |col| {
                        fill_col(xs, col, s, c_in, [d, h, w], self.kernel, d0, d1);
                        let base = s * c_out * dhw + d0 * hw;
                        let dy_slab = &dys[base..base + (c_out - 1) * dhw + v];
                        sgemm_strided(
                            c_out,
                            v,
                            k_rows,
                            1.0,
                            dy_slab,
                            dhw as isize,
                            1,
                            col,
                            1,
                            v as isize,
                            1.0,
                            &mut dw,
                            k_rows as isize,
                            1,
                        );
                        for co in 0..c_out {
                            let seg = &dy_slab[co * dhw..co * dhw + v];
                            let mut acc = 0.0f32;
                            for &g in seg {
                                acc += g;
                            }
                            db[co] += acc;
                        }
                    });
                }
                (dw, db)
            })
            .collect();
        {
            let gw = self.w.grad_slice_mut();
            for (dw, _) in &partials {
                for (g, &p) in gw.iter_mut().zip(dw.iter()) {
                    *g += p;
                }
            }
            let gb = self.b.grad_slice_mut();
            for (_, db) in &partials {
                for (g, &p) in gb.iter_mut().zip(db.iter()) {
                    *g += p;
                }
            }
        }

        // dX = conv(dY, W transposed and flipped)
        let ws = self.w.data_slice();
        let mut w_back = vec![0.0f32; c_in * c_out * kvol];
        let [kd, kh, kw] = self.kernel;
        for co in 0..c_out {
            for ci in 0..c_in {
                for od in 0..kd {
                    for oh in 0..kh {
                        for ow in 0..kw {
                            let o = (od * kh + oh) * kw + ow;
                            let flip = ((kd - 1 - od) * kh + (kh - 1 - oh)) * kw + (kw - 1 - ow);
                            w_back[(ci * c_out + co) * kvol + flip] =
                                ws[(co * c_in + ci) * kvol + o];
                        }
                    }
                }
            }
        }
        conv_same(dy, &w_back, None, c_in, self.kernel)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Transposed convolution with kernel extents equal to the stride (the pool
/// factor), so output blocks do not overlap.
#[derive(Debug, Clone)]
pub struct ConvTranspose3d {
    pub w: Param,
    pub b: Param,
    pub factor: [usize; 3],
    pub c_in: usize,
    pub c_out: usize,
    cache_x: Option<Tensor>,
}

impl ConvTranspose3d {
    pub fn new(
        scope: &str,
        c_in: usize,
        c_out: usize,
        factor: [usize; 3],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = Param::he_normal(
            scoped(scope, "w"),
            &[c_in, c_out, factor[0], factor[1], factor[2]],
            c_in,
            rng,
        );
        let b = Param::zeros(scoped(scope, "b"), &[c_out]);
        ConvTranspose3d {
            w,
            b,
            factor,
            c_in,
            c_out,
            cache_x: None,
        }
    }

    pub fn output_shape(&self, x: &Tensor) -> (usize, usize, usize, usize, usize) {
        let (n, _, d, h, w) = x.dim();
        (
            n,
            self.c_out,
            d * self.factor[0],
            h * self.factor[1],
            w * self.factor[2],
        )
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        debug_assert_eq!(x.dim().1, self.c_in);
        if train {
            self.cache_x = Some(x.clone());
        }
        let (n, c_in, d, h, w) = x.dim();
        let [fd, fh, fw] = self.factor;
        let fvol = fd * fh * fw;
        let (od, oh, ow) = (d * fd, h * fh, w * fw);
        let (ohw, odhw) = (oh * ow, od * oh * ow);
        let hw = h * w;
        let dhw = d * hw;
        let c_out = self.c_out;
        let mut out = Tensor::zeros((n, c_out, od, oh, ow));
        let out_ptr = SendMutPtr(out.as_slice_mut().expect("standard layout").as_mut_ptr());
        let xs = x.as_slice().expect("standard layout");
        let ws = self.w.data_slice();
        let bs = self.b.data_slice();

        let tasks = conv_tasks(n, d, hw, c_out * fvol);
        tasks.par_iter().for_each(|&(s, d0, d1)| {
            let out_ptr = out_ptr;
            let v = (d1 - d0) * hw;
            with_tmp_buf(c_out * fvol * v, |tmp| {
                // tmp (c_out*fvol x v) = W^T (c_out*fvol x c_in) * x slab
                sgemm_strided(
                    c_out * fvol,
                    c_in,
                    v,
                    1.0,
                    ws,
                    1,
                    (c_out * fvol) as isize,
                    &xs[s * c_in * dhw + d0 * hw..],
                    dhw as isize,
                    1,
                    0.0,
                    tmp,
                    v as isize,
                    1,
                );
                // scatter into the (disjoint) output block of this slab
                for co in 0..c_out {
                    let out_ch = unsafe { out_ptr.0.add((s * c_out + co) * odhw) };
                    for zd in 0..fd {
                        for zh in 0..fh {
                            for zw in 0..fw {
                                let row =
                                    (co * fvol + (zd * fh + zh) * fw + zw) * v;
                                for dz in d0..d1 {
                                    for y in 0..h {
                                        let src = row + (dz - d0) * hw + y * w;
                                        let dst =
                                            (dz * fd + zd) * ohw + (y * fh + zh) * ow + zw;
                                        unsafe {
                                            for xw in 0..w {
                                                *out_ch.add(dst + xw * fw) =
                                                    tmp[src + xw] + bs[co];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        });
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache_x.take().expect("forward(train) before backward");
        let (n, c_in, d, h, w) = x.dim();
        let [fd, fh, fw] = self.factor;
        let fvol = fd * fh * fw;
        let (oh, ow) = (h * fh, w * fw);
        let (ohw, odhw) = (oh * ow, d * fd * oh * ow);
        let hw = h * w;
        let dhw = d * hw;
        let c_out = self.c_out;
        let xs = x.as_slice().expect("standard layout");
        let dys = dy.as_slice().expect("standard layout");
        let ws: Vec<f32> = self.w.data_slice().to_vec();

        let gather = |s: usize, d0: usize, d1: usize, g: &mut [f32]| {
            let v = (d1 - d0) * hw;
            for co in 0..c_out {
                let dy_ch = &dys[(s * c_out + co) * odhw..(s * c_out + co + 1) * odhw];
                for zd in 0..fd {
                    for zh in 0..fh {
                        for zw in 0..fw {
                            let row = (co * fvol + (zd * fh + zh) * fw + zw) * v;
                            for dz in d0..d1 {
                                for y in 0..h {
                                    let dst = row + (dz - d0) * hw + y * w;
                                    let src = (dz * fd + zd) * ohw + (y * fh + zh) * ow + zw;
                                    for xw in 0..w {
                                        g[dst + xw] = dy_ch[src + xw * fw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };

        // dW, db
        let tasks = conv_tasks(n, d, hw, c_out * fvol);
        let groups = partition_ranges(tasks.len(), GRAD_GROUPS);
        let partials: Vec<(Vec<f32>, Vec<f32>)> = groups
            .par_iter()
            .map(|&(t0, t1)| {
                let mut dw = vec![0.0f32; c_in * c_out * fvol];
                let mut db = vec![0.0f32; c_out];
                for &(s, d0, d1) in &tasks[t0..t1] {
                    let v = (d1 - d0) * hw;
                    with_tmp_buf(c_out * fvol * v, |g| {
                        gather(s, d0, d1, g);
                        // dW (c_in x c_out*fvol) += x slab (c_in x v) * g^T
                        sgemm_strided(
                            c_in,
                            v,
                            c_out * fvol,
                            1.0,
                            &xs[s * c_in * dhw + d0 * hw..],
                            dhw as isize,
                            1,
                            g,
                            1,
                            v as isize,
                            1.0,
                            &mut dw,
                            (c_out * fvol) as isize,
                            1,
                        );
                        for co in 0..c_out {
                            let mut acc = 0.0f32;
                            for o in 0..fvol {
                                let row = (co * fvol + o) * v;
                                for val in &g[row..row + v] {
                                    acc += *val;
                                }
                            }
                            db[co] += acc;
                        }
                    });
                }
                (dw, db)
            })
            .collect();
        {
            let gw = self.w.grad_slice_mut();
            for (dw, _) in &partials {
                for (gq, &p) in gw.iter_mut().zip(dw.iter()) {
                    *gq += p;
                }
            }
            let gb = self.b.grad_slice_mut();
            for (_, db) in &partials {
                for (gq, &p) in gb.iter_mut().zip(db.iter()) {
                    *gq += p;
                }
            }
        }

        // dX slab (c_in x v) = W (c_in x c_out*fvol) * g
        let mut dx = Tensor::zeros((n, c_in, d, h, w));
        let dx_ptr = SendMutPtr(dx.as_slice_mut().expect("standard layout").as_mut_ptr());
        tasks.par_iter().for_each(|&(s, d0, d1)| {
            let dx_ptr = dx_ptr;
            let v = (d1 - d0) * hw;
            with_tmp_buf(c_out * fvol * v, |g| {
                gather(s, d0, d1, g);
                let base = s * c_in * dhw + d0 * hw;
                unsafe {
                    super::gemm::sgemm_ptr(
                        c_in,
                        c_out * fvol,
                        v,
                        1.0,
                        &ws,
                        (c_out * fvol) as isize,
                        1,
                        g,
                        v as isize,
                        1,
                        0.0,
                        dx_ptr.0.add(base),
                        dhw as isize,
                        1,
                    );
                }
            });
        });
        dx
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array5;
    use rand::{Rng, SeedableRng};

    fn naive_conv(x: &Tensor, w: &ndarray::ArrayD<f32>, b: &[f32], kernel: [usize; 3]) -> Tensor {
        let (n, c_in, d, h, wd) = x.dim();
        let c_out = w.shape()[0];
        let [kd, kh, kw] = kernel;
        let (pd, ph, pw) = ((kd as isize - 1) / 2, (kh as isize - 1) / 2, (kw as isize - 1) / 2);
        let mut out = Tensor::zeros((n, c_out, d, h, wd));
        for s in 0..n {
            for co in 0..c_out {
                for z in 0..d {
                    for y in 0..h {
                        for xx in 0..wd {
                            let mut acc = b[co] as f64;
                            for ci in 0..c_in {
                                for od in 0..kd {
                                    for oh in 0..kh {
                                        for ow in 0..kw {
                                            let sz = z as isize + od as isize - pd;
                                            let sy = y as isize + oh as isize - ph;
                                            let sx = xx as isize + ow as isize - pw;
                                            if sz < 0 || sy < 0 || sx < 0
                                                || sz >= d as isize
                                                || sy >= h as isize
                                                || sx >= wd as isize
                                            {
                                                continue;
                                            }
                                            acc += w[[co, ci, od, oh, ow]] as f64
                                                * x[[s, ci, sz as usize, sy as usize, sx as usize]]
                                                    as f64;
                                        }
                                    }
                                }
                            }
                            out[[s, co, z, y, xx]] = acc as f32;
                        }
                    }
                }
            }
        }
        out
    }

    fn random_tensor(shape: (usize, usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array5::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_naive_3x3x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv3d::new("t", 3, 4, [3, 3, 3], &mut rng);
        let x = random_tensor((2, 3, 4, 5, 6), 2);
        let y = conv.forward(&x, false);
        let want = naive_conv(&x, &conv.w.data, conv.b.data_slice(), conv.kernel);
        for (a, b) in y.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_matches_naive_1x3x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv3d::new("t", 2, 5, [1, 3, 3], &mut rng);
        let x = random_tensor((1, 2, 3, 8, 7), 4);
        let y = conv.forward(&x, false);
        let want = naive_conv(&x, &conv.w.data, conv.b.data_slice(), conv.kernel);
        for (a, b) in y.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn conv_matches_naive_1x1x1() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv3d::new("t", 4, 2, [1, 1, 1], &mut rng);
        let x = random_tensor((2, 4, 2, 3, 3), 6);
        let y = conv.forward(&x, false);
        let want = naive_conv(&x, &conv.w.data, conv.b.data_slice(), conv.kernel);
        for (a, b) in y.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    /// Finite-difference check of conv backward (loss = weighted sum of y).
    #[test]
    fn conv_backward_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor((1, 2, 3, 4, 4), 8);
        let proj = random_tensor((1, 3, 3, 4, 4), 9);
        let loss = |conv: &mut Conv3d, x: &Tensor| -> f64 {
            let y = conv.forward(x, false);
            y.iter().zip(proj.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let mut conv = Conv3d::new("t", 2, 3, [3, 3, 3], &mut rng);
        conv.forward(&x, true);
        let dx = conv.backward(&proj);

        let h = 1e-3f32;
        // input gradient
        for idx in [[0usize, 0, 0, 0, 0], [0, 1, 2, 3, 1], [0, 0, 1, 2, 3]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let fp = loss(&mut conv, &xp);
            xp[idx] -= 2.0 * h;
            let fm = loss(&mut conv, &xp);
            let num = (fp - fm) / (2.0 * h as f64);
            let ana = dx[idx] as f64;
            assert!((num - ana).abs() < 1e-2 * (1.0 + ana.abs()), "{num} vs {ana}");
        }
        // weight gradient
        for widx in [0usize, 10, 53] {
            let orig = conv.w.data.as_slice().unwrap()[widx];
            conv.w.data.as_slice_mut().unwrap()[widx] = orig + h;
            let fp = loss(&mut conv, &x);
            conv.w.data.as_slice_mut().unwrap()[widx] = orig - h;
            let fm = loss(&mut conv, &x);
            conv.w.data.as_slice_mut().unwrap()[widx] = orig;
            let num = (fp - fm) / (2.0 * h as f64);
            let ana = conv.w.grad.as_slice().unwrap()[widx] as f64;
            assert!((num - ana).abs() < 1e-2 * (1.0 + ana.abs()), "{num} vs {ana}");
        }
        // bias gradient equals sum over dy per channel
        for co in 0..3 {
            let want: f64 = proj
                .index_axis(ndarray::Axis(1), co)
                .iter()
                .map(|&v| v as f64)
                .sum();
            let got = conv.b.grad.as_slice().unwrap()[co] as f64;
            assert!((want - got).abs() < 1e-3);
        }
    }

    fn naive_convtranspose(x: &Tensor, w: &ndarray::ArrayD<f32>, b: &[f32], f: [usize; 3]) -> Tensor {
        let (n, c_in, d, h, wd) = x.dim();
        let c_out = w.shape()[1];
        let mut out = Tensor::zeros((n, c_out, d * f[0], h * f[1], wd * f[2]));
        for s in 0..n {
            for co in 0..c_out {
                for z in 0..d {
                    for y in 0..h {
                        for xx in 0..wd {
                            for od in 0..f[0] {
                                for oh in 0..f[1] {
                                    for ow in 0..f[2] {
                                        let mut acc = 0.0f64;
                                        for ci in 0..c_in {
                                            acc += w[[ci, co, od, oh, ow]] as f64
                                                * x[[s, ci, z, y, xx]] as f64;
                                        }
                                        out[[s, co, z * f[0] + od, y * f[1] + oh, xx * f[2] + ow]] =
                                            (acc + b[co] as f64) as f32;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn convtranspose_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut up = ConvTranspose3d::new("t", 3, 2, [2, 2, 2], &mut rng);
        let x = random_tensor((2, 3, 2, 3, 3), 12);
        let y = up.forward(&x, false);
        let want = naive_convtranspose(&x, &up.w.data, up.b.data_slice(), up.factor);
        for (a, b) in y.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
        assert_eq!(y.dim(), (2, 2, 4, 6, 6));
    }

    #[test]
    fn convtranspose_backward_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_tensor((1, 2, 2, 2, 2), 14);
        let proj = random_tensor((1, 3, 2, 4, 4), 15);
        let loss = |up: &mut ConvTranspose3d, x: &Tensor| -> f64 {
            let y = up.forward(x, false);
            y.iter().zip(proj.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let mut up = ConvTranspose3d::new("t", 2, 3, [1, 2, 2], &mut rng);
        up.forward(&x, true);
        let dx = up.backward(&proj);

        let h = 1e-3f32;
        for idx in [[0usize, 0, 0, 0, 0], [0, 1, 1, 1, 1], [0, 0, 1, 0, 1]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let fp = loss(&mut up, &xp);
            xp[idx] -= 2.0 * h;
            let fm = loss(&mut up, &xp);
            let num = (fp - fm) / (2.0 * h as f64);
            let ana = dx[idx] as f64;
            assert!((num - ana).abs() < 1e-2 * (1.0 + ana.abs()), "{num} vs {ana}");
        }
        for widx in [0usize, 5, 11] {
            let orig = up.w.data.as_slice().unwrap()[widx];
            up.w.data.as_slice_mut().unwrap()[widx] = orig + h;
            let fp = loss(&mut up, &x);
            up.w.data.as_slice_mut().unwrap()[widx] = orig - h;
            let fm = loss(&mut up, &x);
            up.w.data.as_slice_mut().unwrap()[widx] = orig;
            let num = (fp - fm) / (2.0 * h as f64);
            let ana = up.w.grad.as_slice().unwrap()[widx] as f64;
            assert!((num - ana).abs() < 1e-2 * (1.0 + ana.abs()), "{num} vs {ana}");
        }
    }

    #[test]
    fn conv_deterministic_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut conv = Conv3d::new("t", 8, 8, [3, 3, 3], &mut rng);
        let x = random_tensor((2, 8, 8, 16, 16), 18);
        let y1 = conv.forward(&x, true);
        let d1 = conv.backward(&y1);
        let g1 = conv.w.grad.clone();
        conv.w.zero_grad();
        conv.b.zero_grad();
        let y2 = conv.forward(&x, true);
        let d2 = conv.backward(&y2);
        assert_eq!(y1, y2);
        assert_eq!(d1, d2);
        assert_eq!(g1, conv.w.grad);
    }
}
