//! Central-difference verification of analytic loss gradients, plus the JSON
//! report it emits.

use crate::error::{Error, Result};
use crate::losses::{hdl_with_grad, total_loss_with_grad, HdlConfig};
use crate::network::AttentionMode;
use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::Serialize;

/// Coordinates closer than this to a |p - g| kink are excluded from the
/// numerical comparison when lambda > 0.
pub const KINK_EXCLUSION: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub loss_name: String,
    pub lambda: f64,
    pub max_rel_error: f64,
    pub n_coords: usize,
    pub n_excluded_kinks: usize,
    pub pass: bool,
}

/// Compares `analytic` against central differences of `f` at `x` with step
/// `h`, skipping coordinates where `exclude` is set. Relative error uses the
/// denominator `max(|analytic|, |numeric|, 1e-8)` per coordinate.
pub fn grad_check(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    analytic: &[f64],
    x: &[f64],
    h: f64,
    tolerance: f64,
    exclude: &[bool],
    loss_name: &str,
    lambda: f64,
) -> Result<GradCheckReport> {
    assert_eq!(analytic.len(), x.len());
    assert_eq!(exclude.len(), x.len());
    let mut point = x.to_vec();
    let mut max_rel = 0.0f64;
    let mut n_coords = 0usize;
    let mut n_excluded = 0usize;
    for i in 0..x.len() {
        if exclude[i] {
            n_excluded += 1;
            continue;
        }
        point[i] = x[i] + h;
        let fp = f(&point)?;
        point[i] = x[i] - h;
        let fm = f(&point)?;
        point[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "loss non-finite at perturbed coordinate {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        max_rel = max_rel.max(rel);
        n_coords += 1;
    }
    Ok(GradCheckReport {
        loss_name: loss_name.to_string(),
        lambda,
        max_rel_error: max_rel,
        n_coords,
        n_excluded_kinks: n_excluded,
        pass: max_rel < tolerance,
    })
}

/// Checks the analytic hardness-weighted Dice gradient on a given (p, g)
/// pair. Kink coordinates (|p - g| < 1e-6) are excluded when lambda > 0.
pub fn grad_check_hdl(
    p: ArrayView2<f64>,
    g: ArrayView2<f64>,
    config: &HdlConfig,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = hdl_with_grad(p, g, config)?;
    let shape = (p.shape()[0], p.shape()[1]);
    let x: Vec<f64> = p.iter().copied().collect();
    let gv: Vec<f64> = g.iter().copied().collect();
    let exclude: Vec<bool> = if config.lambda > 0.0 {
        x.iter()
            .zip(gv.iter())
            .map(|(&pi, &gi)| (pi - gi).abs() < KINK_EXCLUSION)
            .collect()
    } else {
        vec![false; x.len()]
    };
    let g_owned = g.to_owned();
    let cfg = *config;
    let mut f = move |flat: &[f64]| -> Result<f64> {
        let pa = Array2::from_shape_vec(shape, flat.to_vec()).expect("shape fixed");
        crate::losses::hdl(pa.view(), g_owned.view(), &cfg)
    };
    let analytic_flat: Vec<f64> = analytic.iter().copied().collect();
    let name = if config.lambda == 0.0 { "dice" } else { "hdl" };
    grad_check(
        &mut f,
        &analytic_flat,
        &x,
        h,
        tolerance,
        &exclude,
        name,
        config.lambda,
    )
}

/// Checks the composite supervised-attention loss gradient with respect to
/// both the class probabilities and every attention map (one flattened
/// coordinate vector).
#[allow(clippy::too_many_arguments)]
pub fn grad_check_total(
    probs: ArrayView2<f64>,
    onehot: ArrayView2<f64>,
    attentions: &[ArrayView1<f64>],
    pooled: &[ArrayView1<f64>],
    config: &HdlConfig,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, dprobs, dattn) =
        total_loss_with_grad(probs, onehot, attentions, pooled, config, AttentionMode::SpvPA)?;

    let shape = (probs.shape()[0], probs.shape()[1]);
    let mut x: Vec<f64> = probs.iter().copied().collect();
    let mut targets: Vec<f64> = onehot.iter().copied().collect();
    let mut analytic: Vec<f64> = dprobs.iter().copied().collect();
    let attn_lens: Vec<usize> = attentions.iter().map(|a| a.len()).collect();
    for ((a, t), d) in attentions.iter().zip(pooled.iter()).zip(dattn.iter()) {
        x.extend(a.iter().copied());
        targets.extend(t.iter().copied());
        analytic.extend(d.iter().copied());
    }
    let exclude: Vec<bool> = if config.lambda > 0.0 {
        x.iter()
            .zip(targets.iter())
            .map(|(&pi, &gi)| (pi - gi).abs() < KINK_EXCLUSION)
            .collect()
    } else {
        vec![false; x.len()]
    };

    let onehot_owned = onehot.to_owned();
    let pooled_owned: Vec<ndarray::Array1<f64>> = pooled.iter().map(|p| p.to_owned()).collect();
    let cfg = *config;
    let n_probs = shape.0 * shape.1;
    let mut f = move |flat: &[f64]| -> Result<f64> {
        let pa = Array2::from_shape_vec(shape, flat[..n_probs].to_vec()).expect("shape fixed");
        let mut attn = Vec::with_capacity(attn_lens.len());
        let mut off = n_probs;
        for &len in &attn_lens {
            attn.push(ndarray::Array1::from(flat[off..off + len].to_vec()));
            off += len;
        }
        let att_views: Vec<_> = attn.iter().map(|a| a.view()).collect();
        let tgt_views: Vec<_> = pooled_owned.iter().map(|p| p.view()).collect();
        Ok(crate::losses::total_loss(
            pa.view(),
            onehot_owned.view(),
            &att_views,
            &tgt_views,
            &cfg,
            AttentionMode::SpvPA,
        )?
        .total)
    };
    grad_check(
        &mut f,
        &analytic,
        &x,
        h,
        tolerance,
        &exclude,
        "total_spvpa",
        config.lambda,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Random (p, g) with p kept away from kinks: g is binary and p is drawn
    /// from (0.05, 0.45) or (0.55, 0.95) so |p - g| >= 0.05 everywhere.
    pub(crate) fn random_pair(
        rng: &mut ChaCha8Rng,
        channels: usize,
        voxels: usize,
    ) -> (Array2<f64>, Array2<f64>) {
        let mut p = Array2::<f64>::zeros((channels, voxels));
        let mut g = Array2::<f64>::zeros((channels, voxels));
        for v in 0..voxels {
            let fg = rng.gen_range(0..channels);
            for c in 0..channels {
                g[[c, v]] = f64::from(c == fg);
                let lo = if rng.gen_bool(0.5) { 0.05 } else { 0.55 };
                p[[c, v]] = rng.gen_range(lo..lo + 0.40);
            }
        }
        (p, g)
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (p, g) = random_pair(&mut rng, 2, 4 * 4 * 4);
        let cfg = HdlConfig::with_lambda(0.0);
        let report = grad_check_hdl(p.view(), g.view(), &cfg, 1e-5, 1e-4).unwrap();
        assert!(report.pass, "max rel error {}", report.max_rel_error);
        assert_eq!(report.n_excluded_kinks, 0);
    }

    #[test]
    fn hdl_coupled_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (p, g) = random_pair(&mut rng, 2, 32);
        let cfg = HdlConfig {
            lambda: 0.6,
            ..Default::default()
        };
        let report = grad_check_hdl(p.view(), g.view(), &cfg, 1e-5, 1e-4).unwrap();
        assert!(report.pass, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn hdl_frozen_weight_gradient_matches_frozen_evaluation() {
        // with couple_weight_gradient = false the analytic gradient treats w
        // as constant; compare against finite differences of the frozen-w loss
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (p, g) = random_pair(&mut rng, 1, 24);
        let cfg = HdlConfig {
            lambda: 0.6,
            couple_weight_gradient: false,
            ..Default::default()
        };
        let (_, analytic) = hdl_with_grad(p.view(), g.view(), &cfg).unwrap();
        let w = crate::losses::hardness_weights(p.view(), g.view(), &cfg).unwrap();
        let g_owned = g.clone();
        let shape = (1, 24);
        let eps = cfg.epsilon;
        let mut f = move |flat: &[f64]| -> Result<f64> {
            let pa = Array2::from_shape_vec(shape, flat.to_vec()).unwrap();
            let mut num = eps;
            let mut den = eps;
            for ((&pi, &gi), &wi) in pa.iter().zip(g_owned.iter()).zip(w.iter()) {
                num += 2.0 * wi * pi * gi;
                den += wi * (pi + gi);
            }
            Ok(1.0 - num / den)
        };
        let x: Vec<f64> = p.iter().copied().collect();
        let a: Vec<f64> = analytic.iter().copied().collect();
        let report = grad_check(
            &mut f,
            &a,
            &x,
            1e-5,
            1e-4,
            &vec![false; x.len()],
            "hdl_frozen_w",
            0.6,
        )
        .unwrap();
        assert!(report.pass, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (p, g) = random_pair(&mut rng, 2, 16);
        let attn: Vec<Array1<f64>> = (0..3)
            .map(|_| Array1::from_shape_fn(8, |_| rng.gen_range(0.05..0.45)))
            .collect();
        let pooled: Vec<Array1<f64>> = (0..3)
            .map(|_| Array1::from_shape_fn(8, |_| f64::from(rng.gen_bool(0.3))))
            .collect();
        let av: Vec<_> = attn.iter().map(|a| a.view()).collect();
        let pv: Vec<_> = pooled.iter().map(|p| p.view()).collect();
        let cfg = HdlConfig::with_lambda(0.6);
        let report =
            grad_check_total(p.view(), g.view(), &av, &pv, &cfg, 1e-5, 1e-4).unwrap();
        assert!(report.pass, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let x = vec![0.3, -0.7, 1.1];
        let analytic = vec![0.0; 3];
        let mut f = |_: &[f64]| -> Result<f64> { Ok(42.0) };
        let report = grad_check(
            &mut f,
            &analytic,
            &x,
            1e-5,
            1e-4,
            &[false, false, false],
            "constant",
            0.0,
        )
        .unwrap();
        assert!(report.pass);
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn report_serializes_with_fixed_schema() {
        let report = GradCheckReport {
            loss_name: "hdl".into(),
            lambda: 0.6,
            max_rel_error: 1e-6,
            n_coords: 10,
            n_excluded_kinks: 0,
            pass: true,
        };
        let json = serde_json::to_value(&report).unwrap();
        for key in [
            "loss_name",
            "lambda",
            "max_rel_error",
            "n_coords",
            "n_excluded_kinks",
            "pass",
        ] {
            assert!(json.get(key).is_some(), "missing key {key}");
        }
    }
}
