//! Training loop: Adam with additive L2 weight decay, step-halved learning
//! rate, periodic validation on mean foreground Dice, early stopping, and
//! best-checkpoint persistence.

pub mod ablation;
pub mod export;

use crate::dataset::{Manifest, Split};
use crate::error::{Error, Result};
use crate::losses::{self, HdlConfig};
use crate::metrics::{case_metrics, CaseMetrics};
use crate::network::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::network::{AttentionMap, AttentionMode, Network, NetworkConfig, Prediction, Variant};
use crate::nn::adam::{lr_at_step, Adam};
use crate::nn::Tensor;
use crate::volume::{normalize, resample_depth, DepthInterp, LabelVolume, SegmentationTarget, Volume};
use ndarray::{Array1, Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr_init: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_halving")]
    pub lr_halving_period_steps: usize,
    pub max_steps: usize,
    #[serde(default = "default_val_interval")]
    pub val_interval_steps: usize,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub hdl: HdlConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    /// Depth interpolation used when resampling input for the all-3D variant.
    #[serde(default = "default_interp")]
    pub depth_interp: DepthInterp,
}

fn default_batch() -> usize {
    2
}
fn default_lr() -> f64 {
    1e-4
}
fn default_wd() -> f64 {
    1e-7
}
fn default_halving() -> usize {
    10_000
}
fn default_val_interval() -> usize {
    500
}
fn default_patience() -> usize {
    5
}
fn default_interp() -> DepthInterp {
    DepthInterp::Linear
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        if self.val_interval_steps == 0 {
            return Err(Error::Config("val_interval_steps must be >= 1".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be >= 1".into()));
        }
        if !(self.lr_init > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr_init must be > 0, weight_decay >= 0".into()));
        }
        self.hdl.validate()?;
        self.network.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValRound {
    pub step: usize,
    pub mean_dice: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub rounds: Vec<ValRound>,
    pub best_step: usize,
    pub best_val_dice: f64,
    pub best_checkpoint: PathBuf,
    pub stopping_reason: String,
    pub steps_run: usize,
    /// Total training loss per optimizer step.
    pub step_losses: Vec<f64>,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| Error::MalformedHeader(format!("run record: {e}")))
    }
}

/// One preprocessed training/validation case.
struct PreparedCase {
    id: String,
    /// Normalized (and, for the 3D variant, depth-resampled) input.
    input: Array3<f32>,
    /// One-hot target on the network grid.
    onehot: Array4<f32>,
    /// Average-pooled foreground per level on the network grid.
    pooled: Vec<Array3<f64>>,
    /// Ground truth on the original grid, for evaluation.
    label_orig: LabelVolume,
    /// Original depth (differs from the network grid for the 3D variant).
    orig_depth: usize,
}

/// Depth the all-3D variant resamples to: the nearest multiple of the
/// network's depth divisor to `d * (depth spacing / in-plane spacing)`.
pub fn resampled_depth_for_3d(depth: usize, spacing_mm: [f64; 3], divisor: usize) -> usize {
    let aniso = spacing_mm[0] / spacing_mm[2];
    let blocks = (depth as f64 * aniso / divisor as f64).round().max(1.0) as usize;
    blocks * divisor
}

fn prepare_case(
    volume: &Volume,
    label: &LabelVolume,
    config: &TrainConfig,
    with_targets: bool,
) -> Result<PreparedCase> {
    label.matches(volume)?;
    let normalized = normalize(volume)?;
    let schedule = config.network.resolved_schedule();
    let orig_depth = volume.shape()[0];

    let (input_vol, label_net) = if config.network.variant == Variant::ThreeD {
        let target = resampled_depth_for_3d(
            orig_depth,
            volume.spacing_mm,
            schedule.required_divisor()[0],
        );
        (
            resample_depth(&normalized, target, config.depth_interp)?,
            crate::volume::resample_depth_label(label, target)?,
        )
    } else {
        (normalized, label.clone())
    };

    let (onehot, pooled) = if with_targets {
        let target = SegmentationTarget::from_label(&label_net);
        let gf = label_net.data.mapv(|v| f64::from(v));
        let pooled = losses::pooled_targets(&gf, &schedule.cumulative_pool_factors())?;
        (target.onehot, pooled.masks)
    } else {
        (Array4::zeros((0, 0, 0, 0)), Vec::new())
    };

    Ok(PreparedCase {
        id: volume.id.clone(),
        input: input_vol.data,
        onehot,
        pooled,
        label_orig: label.clone(),
        orig_depth,
    })
}

fn stack_inputs(cases: &[&PreparedCase]) -> Tensor {
    let s = cases[0].input.shape();
    let (d, h, w) = (s[0], s[1], s[2]);
    let mut x = Tensor::zeros((cases.len(), 1, d, h, w));
    for (i, c) in cases.iter().enumerate() {
        x.index_axis_mut(ndarray::Axis(0), i)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(&c.input);
    }
    x
}

/// (class, batch*voxel) f64 view of a batched (N, C, D, H, W) tensor.
fn to_class_major(t: &Tensor) -> Array2<f64> {
    let (n, c, d, h, w) = t.dim();
    let v = d * h * w;
    let ts = t.as_slice().expect("standard layout");
    let mut out = Array2::<f64>::zeros((c, n * v));
    for s in 0..n {
        for ch in 0..c {
            let src = &ts[(s * c + ch) * v..(s * c + ch + 1) * v];
            let dst = &mut out.as_slice_mut().expect("standard layout")[ch * n * v + s * v..];
            for (o, &x) in dst.iter_mut().zip(src.iter()) {
                *o = x as f64;
            }
        }
    }
    out
}

/// Inverse of [`to_class_major`] for gradients, back to f32 (N, C, D, H, W).
fn from_class_major(g: &Array2<f64>, dims: (usize, usize, usize, usize, usize)) -> Tensor {
    let (n, c, d, h, w) = dims;
    let v = d * h * w;
    let gs = g.as_slice().expect("standard layout");
    let mut out = Tensor::zeros(dims);
    {
        let os = out.as_slice_mut().expect("standard layout");
        for s in 0..n {
            for ch in 0..c {
                let src = &gs[ch * n * v + s * v..ch * n * v + (s + 1) * v];
                let dst = &mut os[(s * c + ch) * v..(s * c + ch + 1) * v];
                for (o, &x) in dst.iter_mut().zip(src.iter()) {
                    *o = x as f32;
                }
            }
        }
    }
    out
}

fn batched_onehot(cases: &[&PreparedCase]) -> Array2<f64> {
    let s = cases[0].onehot.shape();
    let (c, v) = (s[0], s[1] * s[2] * s[3]);
    let n = cases.len();
    let mut out = Array2::<f64>::zeros((c, n * v));
    for (i, case) in cases.iter().enumerate() {
        let os = case.onehot.as_slice().expect("standard layout");
        let dst = out.as_slice_mut().expect("standard layout");
        for ch in 0..c {
            for (j, &x) in os[ch * v..(ch + 1) * v].iter().enumerate() {
                dst[ch * n * v + i * v + j] = x as f64;
            }
        }
    }
    out
}

fn batched_pooled(cases: &[&PreparedCase], level: usize) -> Array1<f64> {
    let v = cases[0].pooled[level].len();
    let mut out = Array1::<f64>::zeros(cases.len() * v);
    for (i, case) in cases.iter().enumerate() {
        let src = case.pooled[level].as_slice().expect("standard layout");
        out.as_slice_mut().expect("standard layout")[i * v..(i + 1) * v]
            .iter_mut()
            .zip(src.iter())
            .for_each(|(o, &x)| *o = x);
    }
    out
}

fn flatten_attention(t: &Tensor) -> Array1<f64> {
    Array1::from_iter(t.iter().map(|&v| v as f64))
}

fn attention_grad_tensor(g: &Array1<f64>, dims: (usize, usize, usize, usize, usize)) -> Tensor {
    let mut out = Tensor::zeros(dims);
    out.as_slice_mut()
        .expect("standard layout")
        .iter_mut()
        .zip(g.iter())
        .for_each(|(o, &x)| *o = x as f32);
    out
}

/// Mean foreground Dice of argmax predictions over a case list.
fn mean_validation_dice(net: &mut Network, cases: &[PreparedCase]) -> Result<f64> {
    let mut sum = 0.0;
    for case in cases {
        let pred = predict_prepared(net, case)?;
        let mask = LabelVolume::new(pred.argmax_foreground(), case.label_orig.spacing_mm)?;
        sum += crate::metrics::dice_score(&mask, &case.label_orig)?;
    }
    Ok(sum / cases.len() as f64)
}

/// Runs the network on one prepared case (eval mode, batch 1) and maps the
/// probabilities back to the original grid when depth was resampled.
fn predict_prepared(net: &mut Network, case: &PreparedCase) -> Result<Prediction> {
    let s = case.input.shape();
    let mut x = Tensor::zeros((1, 1, s[0], s[1], s[2]));
    x.index_axis_mut(ndarray::Axis(0), 0)
        .index_axis_mut(ndarray::Axis(0), 0)
        .assign(&case.input);
    let out = net.forward(&x, false)?;
    let (_, c, d, h, w) = out.probs.dim();

    let probs3 = if d != case.orig_depth {
        // nearest-slice mapping back to the original depth
        let mut p = Array4::<f32>::zeros((c, case.orig_depth, h, w));
        let scale = d as f64 / case.orig_depth as f64;
        for z in 0..case.orig_depth {
            let src = ((z as f64 + 0.5) * scale - 0.5)
                .round()
                .clamp(0.0, (d - 1) as f64) as usize;
            for ch in 0..c {
                p.index_axis_mut(ndarray::Axis(0), ch)
                    .index_axis_mut(ndarray::Axis(0), z)
                    .assign(&out.probs.index_axis(ndarray::Axis(0), 0).index_axis(ndarray::Axis(0), ch).index_axis(ndarray::Axis(0), src));
            }
        }
        p
    } else {
        out.probs.index_axis(ndarray::Axis(0), 0).to_owned()
    };

    let attentions = out
        .attentions
        .iter()
        .enumerate()
        .map(|(l, a)| AttentionMap {
            values: a
                .index_axis(ndarray::Axis(0), 0)
                .index_axis(ndarray::Axis(0), 0)
                .to_owned(),
            level: l + 1,
        })
        .collect();
    Ok(Prediction {
        probs: probs3,
        attentions,
    })
}

/// Public single-case inference from raw (volume, label-free) input.
pub fn predict_case(net: &mut Network, volume: &Volume, config: &TrainConfig) -> Result<Prediction> {
    let dummy = LabelVolume::new(
        Array3::zeros((volume.shape()[0], volume.shape()[1], volume.shape()[2])),
        volume.spacing_mm,
    )?;
    let case = prepare_case(volume, &dummy, config, false)?;
    predict_prepared(net, &case)
}

pub fn train(config: &TrainConfig, manifest: &Manifest, out_dir: &Path) -> Result<RunRecord> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let train_raw = manifest.load_split(Split::Train)?;
    let val_raw = manifest.load_split(Split::Val)?;
    if train_raw.is_empty() || val_raw.is_empty() {
        return Err(Error::InvalidArgument(
            "train and val splits must be nonempty".into(),
        ));
    }
    let train_cases: Vec<PreparedCase> = train_raw
        .iter()
        .map(|(v, l)| prepare_case(v, l, config, true))
        .collect::<Result<_>>()?;
    let val_cases: Vec<PreparedCase> = val_raw
        .iter()
        .map(|(v, l)| prepare_case(v, l, config, false))
        .collect::<Result<_>>()?;

    let mut net = Network::new(&config.network, config.seed)?;
    let n_levels = net.n_levels();
    let adam = Adam::new(config.weight_decay as f32);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9E37_79B9));
    let supervised = config.network.attention_mode == AttentionMode::SpvPA;

    let mut queue: Vec<usize> = Vec::new();
    let mut step_losses = Vec::with_capacity(config.max_steps);
    let mut rounds: Vec<ValRound> = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut rounds_since_improvement = 0usize;
    let mut stopping_reason = String::from("max_steps");
    let best_dir = out_dir.join("best");
    let mut steps_run = 0usize;

    for step in 0..config.max_steps {
        // deterministic batch order: reshuffled index queue per epoch
        let mut batch_idx = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if queue.is_empty() {
                queue = (0..train_cases.len()).collect();
                queue.shuffle(&mut order_rng);
            }
            batch_idx.push(queue.pop().expect("refilled"));
        }
        let batch: Vec<&PreparedCase> = batch_idx.iter().map(|&i| &train_cases[i]).collect();

        let x = stack_inputs(&batch);
        let out = net.forward(&x, true)?;
        let dims = out.probs.dim();
        let probs = to_class_major(&out.probs);
        let onehot = batched_onehot(&batch);

        let (attn_flat, pooled_flat): (Vec<Array1<f64>>, Vec<Array1<f64>>) = if supervised {
            let a: Vec<Array1<f64>> = out.attentions.iter().map(flatten_attention).collect();
            let p: Vec<Array1<f64>> = (0..n_levels).map(|l| batched_pooled(&batch, l)).collect();
            (a, p)
        } else {
            (Vec::new(), Vec::new())
        };
        let attn_views: Vec<_> = attn_flat.iter().map(|a| a.view()).collect();
        let pooled_views: Vec<_> = pooled_flat.iter().map(|p| p.view()).collect();

        let (parts, dprobs, dattn) = losses::total_loss_with_grad(
            probs.view(),
            onehot.view(),
            &attn_views,
            &pooled_views,
            &config.hdl,
            config.network.attention_mode,
        )?;
        if !parts.total.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|c| c.id.as_str()).collect();
            return Err(Error::NonFiniteLoss(format!(
                "step {step}, batch {ids:?}: total={} segmentation={} attention={}",
                parts.total, parts.segmentation, parts.attention
            )));
        }
        step_losses.push(parts.total);

        let dprobs_t = from_class_major(&dprobs, dims);
        let dattn_t: Vec<Option<Tensor>> = if supervised {
            out.attentions
                .iter()
                .zip(dattn.iter())
                .map(|(a, g)| Some(attention_grad_tensor(g, a.dim())))
                .collect()
        } else {
            Vec::new()
        };
        net.backward(&dprobs_t, &dattn_t);

        let lr = lr_at_step(step, config.lr_init, config.lr_halving_period_steps) as f32;
        net.visit_params(&mut |p| adam.step_param(p, lr, step + 1));
        net.zero_grads();
        steps_run = step + 1;

        if (step + 1) % config.val_interval_steps == 0 || step + 1 == config.max_steps {
            let mean_dice = mean_validation_dice(&mut net, &val_cases)?;
            rounds.push(ValRound {
                step: step + 1,
                mean_dice,
            });
            let improved = best.map(|(_, b)| mean_dice > b).unwrap_or(true);
            if improved {
                best = Some((step + 1, mean_dice));
                rounds_since_improvement = 0;
                let meta = CheckpointMeta {
                    format_version: 1,
                    network: config.network.clone(),
                    step: step + 1,
                    val_dice: Some(mean_dice),
                    init_seed: config.seed,
                };
                save_checkpoint(&best_dir, &mut net, &meta)?;
            } else {
                rounds_since_improvement += 1;
                if rounds_since_improvement >= config.early_stop_patience {
                    stopping_reason = "early_stop".into();
                    break;
                }
            }
        }
    }

    let (best_step, best_val_dice) = best.expect("at least one validation round");
    let record = RunRecord {
        config: config.clone(),
        rounds,
        best_step,
        best_val_dice,
        best_checkpoint: best_dir,
        stopping_reason,
        steps_run,
        step_losses,
    };
    fs::write(
        out_dir.join("run_record.json"),
        serde_json::to_string_pretty(&record)?,
    )?;
    Ok(record)
}

/// Evaluates a trained network on one split, producing per-case metrics in
/// manifest order.
pub fn evaluate(
    net: &mut Network,
    config: &TrainConfig,
    manifest: &Manifest,
    split: Split,
) -> Result<Vec<CaseMetrics>> {
    let cases = manifest.load_split(split)?;
    if cases.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "split {:?} is empty",
            split.dir_name()
        )));
    }
    let mut rows = Vec::with_capacity(cases.len());
    for (volume, label) in &cases {
        let prepared = prepare_case(volume, label, config, false)?;
        let pred = predict_prepared(net, &prepared)?;
        let mask = LabelVolume::new(pred.argmax_foreground(), label.spacing_mm)?;
        rows.push(case_metrics(&volume.id, &mask, label)?);
    }
    Ok(rows)
}
