//! Thin wrapper over matrixmultiply's single-threaded sgemm. Strided views
//! let callers read from and write into tensor slabs without copies.

/// C = alpha * A * B + beta * C with explicit strides.
/// A is m x k (row stride rsa, col stride csa), B is k x n, C is m x n.
#[allow(clippy::too_many_arguments)]
pub fn sgemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
    rsc: isize,
    csc: isize,
) {
    debug_assert!(a.len() >= ((m - 1) as isize * rsa + (k - 1) as isize * csa) as usize + 1);
    debug_assert!(b.len() >= ((k - 1) as isize * rsb + (n - 1) as isize * csb) as usize + 1);
    debug_assert!(c.len() >= ((m - 1) as isize * rsc + (n - 1) as isize * csc) as usize + 1);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Row-major C(m x n) = A(m x k) * B(k x n), overwriting C.
pub fn sgemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    sgemm_strided(
        m, k, n, 1.0, a, k as isize, 1, b, n as isize, 1, 0.0, c, n as isize, 1,
    );
}

/// Variant writing through a raw output pointer. Used where parallel tasks
/// write provably disjoint strided regions of one tensor, which cannot be
/// expressed as non-overlapping `&mut` slices.
///
/// # Safety
/// `c` must be valid for writes at every `i*rsc + j*csc` (i < m, j < n) and
/// no other thread may touch those positions concurrently.
#[allow(clippy::too_many_arguments)]
pub unsafe fn sgemm_ptr(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: *mut f32,
    rsc: isize,
    csc: isize,
) {
    matrixmultiply::sgemm(
        m,
        k,
        n,
        alpha,
        a.as_ptr(),
        rsa,
        csa,
        b.as_ptr(),
        rsb,
        csb,
        beta,
        c,
        rsc,
        csc,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_matmul() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32).sin()).collect();
        let mut c = vec![0.0f32; m * n];
        sgemm(m, k, n, &a, &b, &mut c);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for l in 0..k {
                    acc += a[i * k + l] * b[l * n + j];
                }
                assert!((c[i * n + j] - acc).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn transposed_b_via_strides() {
        // C = A * B^T where B is stored row-major n x k
        let (m, k, n) = (2, 3, 2);
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![1.0, 0.5, -1.0, 2.0, 1.0, 0.0]; // n x k
        let mut c = vec![0.0f32; m * n];
        sgemm_strided(
            m, k, n, 1.0, &a, k as isize, 1, &b, 1, k as isize, 0.0, &mut c, n as isize, 1,
        );
        // row 0: [1,2,3] . [1,0.5,-1] = -1 ; [1,2,3] . [2,1,0] = 4
        assert_eq!(c, vec![-1.0, 4.0, 0.5, 13.0]);
    }
}
