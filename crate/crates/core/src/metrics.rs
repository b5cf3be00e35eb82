//! Evaluation metrics: Dice overlap, average symmetric surface distance in
//! millimetres, relative volume error, and a paired t-test for comparing
//! per-case metric lists.
//!
//! Surface convention: a surface voxel is a foreground voxel with at least
//! one 6-connected background neighbor; the array boundary counts as
//! background. Physical coordinates are `index * spacing`.

use crate::error::{Error, Result};
use crate::volume::LabelVolume;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

#[derive(Debug, Clone, Serialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice: f64,
    /// Missing when either surface is empty (undefined, never a sentinel).
    pub assd_mm: Option<f64>,
    /// Missing when the ground truth is empty.
    pub rve_pct: Option<f64>,
}

fn check_shapes(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Binary Dice overlap `2|a n b| / (|a| + |b|)`; 1.0 when both masks are
/// empty.
pub fn dice_score(a: &LabelVolume, b: &LabelVolume) -> Result<f64> {
    check_shapes(a, b)?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.data.iter().zip(b.data.iter()) {
        inter += usize::from(x == 1 && y == 1);
        total += usize::from(x == 1) + usize::from(y == 1);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Surface voxels under the 6-connectivity convention, as physical
/// coordinates in mm.
pub fn surface_points(mask: &LabelVolume) -> Vec<[f64; 3]> {
    let [nd, nh, nw] = mask.shape();
    let sp = mask.spacing_mm;
    let at = |d: isize, h: isize, w: isize| -> u8 {
        if d < 0 || h < 0 || w < 0 || d >= nd as isize || h >= nh as isize || w >= nw as isize {
            0
        } else {
            mask.data[[d as usize, h as usize, w as usize]]
        }
    };
    let mut out = Vec::new();
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                if mask.data[[d, h, w]] != 1 {
                    continue;
                }
                let (di, hi, wi) = (d as isize, h as isize, w as isize);
                let exposed = at(di - 1, hi, wi) == 0
                    || at(di + 1, hi, wi) == 0
                    || at(di, hi - 1, wi) == 0
                    || at(di, hi + 1, wi) == 0
                    || at(di, hi, wi - 1) == 0
                    || at(di, hi, wi + 1) == 0;
                if exposed {
                    out.push([d as f64 * sp[0], h as f64 * sp[1], w as f64 * sp[2]]);
                }
            }
        }
    }
    out
}

fn min_sq_dist(p: [f64; 3], points: &[[f64; 3]]) -> f64 {
    let mut best = f64::INFINITY;
    for q in points {
        let dd = p[0] - q[0];
        let dh = p[1] - q[1];
        let dw = p[2] - q[2];
        let sq = dd * dd + dh * dh + dw * dw;
        if sq < best {
            best = sq;
        }
    }
    best
}

/// Average symmetric surface distance in millimetres, by exact nearest-
/// neighbor search over the two surface point sets.
pub fn assd(a: &LabelVolume, b: &LabelVolume) -> Result<f64> {
    check_shapes(a, b)?;
    if a.spacing_mm != b.spacing_mm {
        return Err(Error::ShapeMismatch(format!(
            "mask spacings differ: {:?} vs {:?}",
            a.spacing_mm, b.spacing_mm
        )));
    }
    let sa = surface_points(a);
    let sb = surface_points(b);
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::UndefinedMetric(
            "ASSD needs both masks nonempty".into(),
        ));
    }
    let mut sum = 0.0;
    for &p in &sa {
        sum += min_sq_dist(p, &sb).sqrt();
    }
    for &p in &sb {
        sum += min_sq_dist(p, &sa).sqrt();
    }
    Ok(sum / (sa.len() + sb.len()) as f64)
}

/// Relative volume error in percent: `100 * |V_pred - V_gt| / V_gt` with
/// physical volumes.
pub fn rve(pred: &LabelVolume, gt: &LabelVolume) -> Result<f64> {
    check_shapes(pred, gt)?;
    if pred.spacing_mm != gt.spacing_mm {
        return Err(Error::ShapeMismatch(format!(
            "mask spacings differ: {:?} vs {:?}",
            pred.spacing_mm, gt.spacing_mm
        )));
    }
    let voxel = gt.spacing_mm.iter().product::<f64>();
    let vg = gt.foreground_count() as f64 * voxel;
    if vg == 0.0 {
        return Err(Error::UndefinedMetric("RVE needs a nonempty ground truth".into()));
    }
    let vp = pred.foreground_count() as f64 * voxel;
    Ok(100.0 * (vp - vg).abs() / vg)
}

/// Full per-case metric row; undefined metrics are reported as missing.
pub fn case_metrics(case_id: &str, pred: &LabelVolume, gt: &LabelVolume) -> Result<CaseMetrics> {
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        dice: dice_score(pred, gt)?,
        assd_mm: match assd(pred, gt) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        },
        rve_pct: match rve(pred, gt) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        },
    })
}

/// Two-sided paired t-test result.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub dof: usize,
    /// Set when the differences have (numerically) zero variance; with a
    /// nonzero mean the p-value is reported as 0 (p < 1e-12).
    pub zero_variance: bool,
}

/// Paired two-sided t-test on `x_i - y_i` with n-1 degrees of freedom.
pub fn paired_ttest(x: &[f64], y: &[f64]) -> Result<TTest> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "paired t-test needs equal lengths, got {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "paired t-test needs at least 2 pairs".into(),
        ));
    }
    let d: Vec<f64> = x.iter().zip(y.iter()).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let dof = n - 1;
    if var == 0.0 {
        if mean == 0.0 {
            return Ok(TTest {
                t: 0.0,
                p: 1.0,
                dof,
                zero_variance: true,
            });
        }
        return Ok(TTest {
            t: if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY },
            p: 0.0,
            dof,
            zero_variance: true,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, dof as f64)
        .map_err(|e| Error::InvalidArgument(format!("t distribution: {e}")))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTest {
        t,
        p,
        dof,
        zero_variance: false,
    })
}

/// Mean and sample standard deviation of the defined values.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub n_undefined: usize,
}

pub fn summarize(values: &[Option<f64>]) -> Summary {
    let defined: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    let n = defined.len();
    let n_undefined = values.len() - n;
    if n == 0 {
        return Summary {
            mean: f64::NAN,
            std: f64::NAN,
            n,
            n_undefined,
        };
    }
    let mean = defined.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Summary {
        mean,
        std,
        n,
        n_undefined,
    }
}

/// Per-split metrics CSV: `case_id,dice,assd_mm,rve_pct` with empty cells
/// for undefined values.
pub fn metrics_csv(rows: &[CaseMetrics]) -> String {
    let mut out = String::from("case_id,dice,assd_mm,rve_pct\n");
    for r in rows {
        let assd = r.assd_mm.map(|v| format!("{v}")).unwrap_or_default();
        let rve = r.rve_pct.map(|v| format!("{v}")).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.case_id, r.dice, assd, rve));
    }
    out
}

/// Summary JSON matching the mean±std presentation of the results tables.
pub fn summary_json(rows: &[CaseMetrics]) -> serde_json::Value {
    let dice: Vec<Option<f64>> = rows.iter().map(|r| Some(r.dice)).collect();
    let assd: Vec<Option<f64>> = rows.iter().map(|r| r.assd_mm).collect();
    let rve: Vec<Option<f64>> = rows.iter().map(|r| r.rve_pct).collect();
    serde_json::json!({
        "dice": summarize(&dice),
        "assd_mm": summarize(&assd),
        "rve_pct": summarize(&rve),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn mask(shape: (usize, usize, usize), spacing: [f64; 3], ones: &[[usize; 3]]) -> LabelVolume {
        let mut m = Array3::<u8>::zeros(shape);
        for &[d, h, w] in ones {
            m[[d, h, w]] = 1;
        }
        LabelVolume::new(m, spacing).unwrap()
    }

    fn cube(shape: (usize, usize, usize), lo: [usize; 3], hi: [usize; 3]) -> LabelVolume {
        let mut m = Array3::<u8>::zeros(shape);
        for d in lo[0]..hi[0] {
            for h in lo[1]..hi[1] {
                for w in lo[2]..hi[2] {
                    m[[d, h, w]] = 1;
                }
            }
        }
        LabelVolume::new(m, [1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn dice_identity_and_disjoint() {
        let a = mask((2, 2, 2), [1.0; 3], &[[0, 0, 0], [0, 0, 1]]);
        let b = mask((2, 2, 2), [1.0; 3], &[[1, 1, 0], [1, 1, 1]]);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn dice_shifted_cube_half() {
        // 2x2x2 cube vs same cube shifted one voxel along width:
        // overlap 4, |a| = |b| = 8 -> 0.5
        let a = cube((4, 4, 4), [0, 0, 0], [2, 2, 2]);
        let b = cube((4, 4, 4), [0, 0, 1], [2, 2, 3]);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn dice_both_empty_is_one() {
        let a = mask((2, 2, 2), [1.0; 3], &[]);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn assd_identity_zero() {
        let a = cube((4, 4, 4), [1, 1, 1], [3, 3, 3]);
        assert_eq!(assd(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn assd_single_voxel_offset() {
        let sp = [1.5, 0.4, 0.4];
        let a = mask((3, 3, 5), sp, &[[1, 1, 1]]);
        let b = mask((3, 3, 5), sp, &[[1, 1, 3]]);
        let d = assd(&a, &b).unwrap();
        assert!((d - 0.8).abs() < 1e-12, "got {d}");
    }

    #[test]
    fn assd_linear_in_spacing() {
        let a = cube((4, 6, 6), [0, 1, 1], [2, 4, 4]);
        let b = cube((4, 6, 6), [1, 2, 2], [3, 5, 5]);
        let d1 = assd(&a, &b).unwrap();
        let a2 = LabelVolume::new(a.data.clone(), [2.0, 2.0, 2.0]).unwrap();
        let b2 = LabelVolume::new(b.data.clone(), [2.0, 2.0, 2.0]).unwrap();
        let d2 = assd(&a2, &b2).unwrap();
        assert!((d2 - 2.0 * d1).abs() < 1e-12);
    }

    #[test]
    fn assd_empty_mask_is_undefined() {
        let a = cube((3, 3, 3), [0, 0, 0], [2, 2, 2]);
        let empty = mask((3, 3, 3), [1.0; 3], &[]);
        assert!(matches!(assd(&a, &empty), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn rve_examples() {
        let gt = cube((8, 8, 8), [0, 0, 0], [4, 5, 5]); // 100 voxels
        let pred = cube((8, 8, 8), [0, 0, 0], [4, 5, 6]); // 120 voxels
        assert_eq!(rve(&gt, &gt).unwrap(), 0.0);
        assert!((rve(&pred, &gt).unwrap() - 20.0).abs() < 1e-12);
        // invariant to uniform spacing rescale
        let gt2 = LabelVolume::new(gt.data.clone(), [3.0, 3.0, 3.0]).unwrap();
        let pred2 = LabelVolume::new(pred.data.clone(), [3.0, 3.0, 3.0]).unwrap();
        assert_eq!(rve(&pred, &gt).unwrap(), rve(&pred2, &gt2).unwrap());
        let empty = mask((8, 8, 8), [1.0; 3], &[]);
        assert!(matches!(rve(&gt, &empty), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ttest_degenerate_conventions() {
        let x = vec![0.8, 0.9, 0.7];
        let r = paired_ttest(&x, &x).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);
        assert!(r.zero_variance);

        let y: Vec<f64> = x.iter().map(|v| v - 1.0).collect();
        let r = paired_ttest(&x, &y).unwrap();
        assert!(r.zero_variance);
        assert!(r.t.is_infinite() && r.t > 0.0);
        assert!(r.p < 1e-12);
    }

    #[test]
    fn ttest_matches_reference_implementation() {
        // d = [1.0, -0.5, 0.8, 0.3, 0.6]; expected values frozen from an
        // independent statistics package
        let x = vec![1.0, -0.5, 0.8, 0.3, 0.6];
        let y = vec![0.0; 5];
        let r = paired_ttest(&x, &y).unwrap();
        assert!((r.t - 1.6799278063066678).abs() < 1e-12, "t {}", r.t);
        assert!((r.p - 0.1682691387278125).abs() < 1e-10, "p {}", r.p);
        assert_eq!(r.dof, 4);
    }

    #[test]
    fn erosion_toward_gt_never_decreases_dice() {
        // nested cuboids: gt strictly inside pred; peel pred one layer at a
        // time toward gt
        let gt = cube((10, 10, 10), [3, 3, 3], [7, 7, 7]);
        let mut last = 0.0;
        for m in 0..=3 {
            let pred = cube((10, 10, 10), [3 - (3 - m), 3 - (3 - m), 3 - (3 - m)], [7 + 3 - m, 7 + 3 - m, 7 + 3 - m]);
            let d = dice_score(&pred, &gt).unwrap();
            assert!(d >= last, "dice decreased: {d} < {last}");
            last = d;
        }
        assert_eq!(last, 1.0);
    }

    #[test]
    fn csv_has_missing_cells_for_undefined() {
        let rows = vec![CaseMetrics {
            case_id: "c1".into(),
            dice: 0.5,
            assd_mm: None,
            rve_pct: Some(10.0),
        }];
        let csv = metrics_csv(&rows);
        assert!(csv.starts_with("case_id,dice,assd_mm,rve_pct\n"));
        assert!(csv.contains("c1,0.5,,10\n"));
    }
}
