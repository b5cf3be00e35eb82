//! Training losses: voxel-level hardness-weighted Dice loss, plain soft Dice,
//! the multi-scale supervised-attention composite, and pooled attention
//! targets. All loss arithmetic is done in f64; probability arrays are laid
//! out (class, voxel) with batch and spatial axes flattened into the voxel
//! axis.

pub mod gradcheck;

use crate::error::{Error, Result};
use crate::network::AttentionMode;
use ndarray::{Array2, Array3, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

/// Configuration of the hardness-weighted Dice loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HdlConfig {
    /// Degree of hard-voxel weighting, in [0, 1]. 0 recovers plain soft Dice.
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Differentiate through the weights w (default) or treat them as
    /// constants per evaluation.
    #[serde(default = "default_couple")]
    pub couple_weight_gradient: bool,
}

fn default_epsilon() -> f64 {
    1e-5
}
fn default_couple() -> bool {
    true
}

impl Default for HdlConfig {
    fn default() -> Self {
        HdlConfig {
            lambda: 0.0,
            epsilon: default_epsilon(),
            couple_weight_gradient: default_couple(),
        }
    }
}

impl HdlConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        HdlConfig {
            lambda,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

fn check_same_shape(p: &ArrayView2<f64>, g: &ArrayView2<f64>) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            p.shape(),
            g.shape()
        )));
    }
    if p.shape()[0] == 0 {
        return Err(Error::ShapeMismatch("need at least one channel".into()));
    }
    Ok(())
}

/// Per-voxel hardness weights `w = lambda*|p - g| + (1 - lambda)`.
/// Every output lies in [1 - lambda, 1].
pub fn hardness_weights(
    p: ArrayView2<f64>,
    g: ArrayView2<f64>,
    config: &HdlConfig,
) -> Result<Array2<f64>> {
    config.validate()?;
    check_same_shape(&p, &g)?;
    let lambda = config.lambda;
    let mut w = Array2::zeros(p.raw_dim());
    ndarray::Zip::from(&mut w)
        .and(&p)
        .and(&g)
        .for_each(|w, &p, &g| *w = lambda * (p - g).abs() + (1.0 - lambda));
    Ok(w)
}

/// Hardness-weighted Dice loss:
/// `1 - (1/C) * sum_c (2*sum_i w*p*g + eps) / (sum_i w*(p+g) + eps)`.
pub fn hdl(p: ArrayView2<f64>, g: ArrayView2<f64>, config: &HdlConfig) -> Result<f64> {
    config.validate()?;
    check_same_shape(&p, &g)?;
    let (lambda, eps) = (config.lambda, config.epsilon);
    let c_count = p.shape()[0];
    let mut acc = 0.0;
    for c in 0..c_count {
        let (mut num, mut den) = (0.0, 0.0);
        for (&pi, &gi) in p.row(c).iter().zip(g.row(c).iter()) {
            let w = lambda * (pi - gi).abs() + (1.0 - lambda);
            num += w * pi * gi;
            den += w * (pi + gi);
        }
        acc += (2.0 * num + eps) / (den + eps);
    }
    Ok(1.0 - acc / c_count as f64)
}

/// Loss value together with its gradient with respect to `p`. The |p - g|
/// subgradient at 0 is taken as 0; with `couple_weight_gradient == false`
/// the weights are treated as constants.
pub fn hdl_with_grad(
    p: ArrayView2<f64>,
    g: ArrayView2<f64>,
    config: &HdlConfig,
) -> Result<(f64, Array2<f64>)> {
    config.validate()?;
    check_same_shape(&p, &g)?;
    let (lambda, eps) = (config.lambda, config.epsilon);
    let c_count = p.shape()[0];
    let mut grad = Array2::<f64>::zeros(p.raw_dim());
    let mut acc = 0.0;
    for c in 0..c_count {
        let pr = p.row(c);
        let gr = g.row(c);
        let (mut num, mut den) = (0.0, 0.0);
        for (&pi, &gi) in pr.iter().zip(gr.iter()) {
            let w = lambda * (pi - gi).abs() + (1.0 - lambda);
            num += w * pi * gi;
            den += w * (pi + gi);
        }
        let a = 2.0 * num + eps;
        let b = den + eps;
        let inv_b2 = 1.0 / (b * b);
        let mut gc = grad.row_mut(c);
        for ((&pi, &gi), out) in pr.iter().zip(gr.iter()).zip(gc.iter_mut()) {
            let diff = pi - gi;
            let w = lambda * diff.abs() + (1.0 - lambda);
            let wp = if config.couple_weight_gradient {
                lambda * sign0(diff)
            } else {
                0.0
            };
            let da = 2.0 * gi * (w + pi * wp);
            let db = w + (pi + gi) * wp;
            *out = -(da * b - a * db) * inv_b2 / c_count as f64;
        }
        acc += a / b;
    }
    Ok((1.0 - acc / c_count as f64, grad))
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Plain soft Dice loss (no hardness weights). Kept as an independent code
/// path so it can serve as the oracle for `hdl` at lambda = 0.
pub fn soft_dice(p: ArrayView2<f64>, g: ArrayView2<f64>, epsilon: f64) -> Result<f64> {
    check_same_shape(&p, &g)?;
    let c_count = p.shape()[0];
    let mut acc = 0.0;
    for c in 0..c_count {
        let (mut inter, mut total) = (0.0, 0.0);
        for (&pi, &gi) in p.row(c).iter().zip(g.row(c).iter()) {
            inter += pi * gi;
            total += pi + gi;
        }
        acc += (2.0 * inter + epsilon) / (total + epsilon);
    }
    Ok(1.0 - acc / c_count as f64)
}

/// Average-pooled foreground masks, one per resolution level.
#[derive(Debug, Clone)]
pub struct PooledTargets {
    /// masks[l] matches the attention-map resolution of level l+1; masks[0]
    /// equals the input mask exactly.
    pub masks: Vec<Array3<f64>>,
}

/// Exact block-average pooling of a foreground mask down to each level's
/// resolution. `cumulative_factors[l]` is the product of all pool factors
/// applied before level l+1, so the first entry is (1,1,1).
pub fn pooled_targets(
    foreground: &Array3<f64>,
    cumulative_factors: &[[usize; 3]],
) -> Result<PooledTargets> {
    let s = foreground.shape();
    let mut masks = Vec::with_capacity(cumulative_factors.len());
    for (level, f) in cumulative_factors.iter().enumerate() {
        if f.iter().any(|&x| x == 0) {
            return Err(Error::Config(format!("zero pool factor at level {}", level + 1)));
        }
        if s[0] % f[0] != 0 || s[1] % f[1] != 0 || s[2] % f[2] != 0 {
            return Err(Error::ShapeMismatch(format!(
                "mask shape {:?} not divisible by cumulative pool factor {:?} at level {}",
                s,
                f,
                level + 1
            )));
        }
        if *f == [1, 1, 1] {
            masks.push(foreground.clone());
            continue;
        }
        let (od, oh, ow) = (s[0] / f[0], s[1] / f[1], s[2] / f[2]);
        let inv = 1.0 / (f[0] * f[1] * f[2]) as f64;
        let mut m = Array3::<f64>::zeros((od, oh, ow));
        for d in 0..od {
            for h in 0..oh {
                for w in 0..ow {
                    let mut sum = 0.0;
                    for dd in 0..f[0] {
                        for hh in 0..f[1] {
                            for ww in 0..f[2] {
                                sum += foreground[[d * f[0] + dd, h * f[1] + hh, w * f[2] + ww]];
                            }
                        }
                    }
                    m[[d, h, w]] = sum * inv;
                }
            }
        }
        masks.push(m);
    }
    Ok(PooledTargets { masks })
}

/// Loss value broken into its Eq.-style components.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub segmentation: f64,
    /// Mean of the per-level attention terms (0 unless supervised attention).
    pub attention: f64,
}

/// Composite training loss: the segmentation term plus, in supervised-
/// attention mode, the mean of per-level single-channel attention terms.
/// Both terms share the same underlying hardness-weighted Dice loss.
pub fn total_loss(
    probs: ArrayView2<f64>,
    onehot: ArrayView2<f64>,
    attentions: &[ArrayView1<f64>],
    pooled: &[ArrayView1<f64>],
    config: &HdlConfig,
    mode: AttentionMode,
) -> Result<LossParts> {
    let seg = hdl(probs, onehot, config)?;
    if mode != AttentionMode::SpvPA {
        return Ok(LossParts {
            total: seg,
            segmentation: seg,
            attention: 0.0,
        });
    }
    let att = attention_terms(attentions, pooled, config)?;
    Ok(LossParts {
        total: seg + att,
        segmentation: seg,
        attention: att,
    })
}

/// Composite loss plus gradients with respect to the class probabilities and
/// (in supervised mode) each attention map.
pub fn total_loss_with_grad(
    probs: ArrayView2<f64>,
    onehot: ArrayView2<f64>,
    attentions: &[ArrayView1<f64>],
    pooled: &[ArrayView1<f64>],
    config: &HdlConfig,
    mode: AttentionMode,
) -> Result<(LossParts, Array2<f64>, Vec<ndarray::Array1<f64>>)> {
    let (seg, dprobs) = hdl_with_grad(probs, onehot, config)?;
    if mode != AttentionMode::SpvPA {
        return Ok((
            LossParts {
                total: seg,
                segmentation: seg,
                attention: 0.0,
            },
            dprobs,
            Vec::new(),
        ));
    }
    check_levels(attentions, pooled)?;
    let levels = attentions.len() as f64;
    let mut att_sum = 0.0;
    let mut dattn = Vec::with_capacity(attentions.len());
    for (a, t) in attentions.iter().zip(pooled.iter()) {
        let a2 = a.view().insert_axis(ndarray::Axis(0));
        let t2 = t.view().insert_axis(ndarray::Axis(0));
        let (term, dterm) = hdl_with_grad(a2, t2, config)?;
        att_sum += term;
        let mut d = dterm.remove_axis(ndarray::Axis(0));
        d.mapv_inplace(|v| v / levels);
        dattn.push(d);
    }
    let att = att_sum / levels;
    Ok((
        LossParts {
            total: seg + att,
            segmentation: seg,
            attention: att,
        },
        dprobs,
        dattn,
    ))
}

fn attention_terms(
    attentions: &[ArrayView1<f64>],
    pooled: &[ArrayView1<f64>],
    config: &HdlConfig,
) -> Result<f64> {
    check_levels(attentions, pooled)?;
    let mut sum = 0.0;
    for (a, t) in attentions.iter().zip(pooled.iter()) {
        let a2 = a.view().insert_axis(ndarray::Axis(0));
        let t2 = t.view().insert_axis(ndarray::Axis(0));
        sum += hdl(a2, t2, config)?;
    }
    Ok(sum / attentions.len() as f64)
}

fn check_levels(attentions: &[ArrayView1<f64>], pooled: &[ArrayView1<f64>]) -> Result<()> {
    if attentions.is_empty() || attentions.len() != pooled.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} attention maps vs {} pooled targets",
            attentions.len(),
            pooled.len()
        )));
    }
    for (l, (a, t)) in attentions.iter().zip(pooled.iter()).enumerate() {
        if a.len() != t.len() {
            return Err(Error::ShapeMismatch(format!(
                "level {}: attention has {} voxels, pooled target {}",
                l + 1,
                a.len(),
                t.len()
            )));
        }
    }
    Ok(())
}
