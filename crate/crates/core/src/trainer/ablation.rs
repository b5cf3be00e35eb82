//! Ablation-matrix and lambda-sweep harnesses: train every cell with shared
//! seeds and data, evaluate on the test split, and emit result tables with
//! paired t-tests against a designated baseline row.

use crate::dataset::{Manifest, Split};
use crate::error::{Error, Result};
use crate::metrics::{paired_ttest, summarize, CaseMetrics, Summary, TTest};
use crate::network::checkpoint::load_checkpoint;
use crate::network::{AttentionMode, Variant};
use crate::trainer::{evaluate, train, TrainConfig};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    #[serde(default)]
    pub label: Option<String>,
    pub variant: Variant,
    pub attention: AttentionMode,
    pub lambda: f64,
}

impl AblationCell {
    pub fn display_label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        let v = match self.variant {
            Variant::TwoD => "2d-unet",
            Variant::ThreeD => "3d-unet",
            Variant::TwoPointFiveD => "2.5d-unet",
        };
        let a = match self.attention {
            AttentionMode::None => "",
            AttentionMode::PA => "+pa",
            AttentionMode::SpvPA => "+spvpa",
        };
        format!("{v}{a}(lambda={})", self.lambda)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationMatrix {
    pub cells: Vec<AblationCell>,
    /// Row the paired t-tests compare against.
    #[serde(default)]
    pub baseline_index: usize,
}

impl AblationMatrix {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)?;
        let m: AblationMatrix =
            serde_json::from_str(&raw).map_err(|e| Error::Config(format!("matrix: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Config("ablation matrix has no cells".into()));
        }
        if self.baseline_index >= self.cells.len() {
            return Err(Error::Config(format!(
                "baseline_index {} out of range ({} cells)",
                self.baseline_index,
                self.cells.len()
            )));
        }
        for c in &self.cells {
            if !(0.0..=1.0).contains(&c.lambda) {
                return Err(Error::Config(format!("lambda {} not in [0, 1]", c.lambda)));
            }
        }
        Ok(())
    }
}

/// Per-cell aggregated results; per-case values are kept (seed-major, then
/// case order) so rows can be paired for t-tests.
#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub label: String,
    pub variant: Variant,
    pub attention: AttentionMode,
    pub lambda: f64,
    pub dice: Summary,
    pub assd_mm: Summary,
    pub rve_pct: Summary,
    pub dice_values: Vec<f64>,
    pub assd_values: Vec<Option<f64>>,
    pub rve_values: Vec<Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_dice_vs_baseline: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_assd_vs_baseline: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_rve_vs_baseline: Option<f64>,
    pub significant_dice: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationResults {
    pub baseline_index: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<CellResult>,
}

fn cell_config(base: &TrainConfig, cell: &AblationCell, seed: u64) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.hdl.lambda = cell.lambda;
    cfg.network.variant = cell.variant;
    cfg.network.attention_mode = cell.attention;
    // the schedule must follow the variant, not the base config's
    cfg.network.schedule = base.network.schedule.clone().and_then(|s| {
        if cell.variant == base.network.variant {
            Some(s)
        } else {
            None
        }
    });
    cfg
}

/// Trains one configuration per seed and returns per-case metric rows in
/// (seed-major, manifest case order).
fn run_cell(
    base: &TrainConfig,
    cell: &AblationCell,
    manifest: &Manifest,
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Vec<CaseMetrics>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let cfg = cell_config(base, cell, seed);
        let run_dir = out_dir.join(format!("seed_{seed}"));
        let record = train(&cfg, manifest, &run_dir)?;
        let (mut net, _) = load_checkpoint(&record.best_checkpoint)?;
        rows.extend(evaluate(&mut net, &cfg, manifest, Split::Test)?);
    }
    Ok(rows)
}

fn paired_optional(x: &[Option<f64>], y: &[Option<f64>]) -> Option<TTest> {
    let pairs: Vec<(f64, f64)> = x
        .iter()
        .zip(y.iter())
        .filter_map(|(a, b)| a.zip(*b))
        .collect();
    if pairs.len() < 2 {
        return None;
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    paired_ttest(&xs, &ys).ok()
}

pub fn run_ablation(
    matrix: &AblationMatrix,
    base: &TrainConfig,
    manifest: &Manifest,
    seeds: &[u64],
    out_dir: &Path,
) -> Result<AblationResults> {
    matrix.validate()?;
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }
    fs::create_dir_all(out_dir)?;

    let mut per_cell: Vec<Vec<CaseMetrics>> = Vec::new();
    for (i, cell) in matrix.cells.iter().enumerate() {
        let cell_dir = out_dir.join(format!("cell_{i}_{}", sanitize(&cell.display_label())));
        per_cell.push(run_cell(base, cell, manifest, seeds, &cell_dir)?);
    }

    let baseline = &per_cell[matrix.baseline_index];
    let base_dice: Vec<f64> = baseline.iter().map(|r| r.dice).collect();
    let base_assd: Vec<Option<f64>> = baseline.iter().map(|r| r.assd_mm).collect();
    let base_rve: Vec<Option<f64>> = baseline.iter().map(|r| r.rve_pct).collect();

    let mut rows = Vec::new();
    for (i, (cell, metrics)) in matrix.cells.iter().zip(per_cell.iter()).enumerate() {
        let dice: Vec<f64> = metrics.iter().map(|r| r.dice).collect();
        let assd: Vec<Option<f64>> = metrics.iter().map(|r| r.assd_mm).collect();
        let rve: Vec<Option<f64>> = metrics.iter().map(|r| r.rve_pct).collect();
        let dice_opt: Vec<Option<f64>> = dice.iter().map(|&v| Some(v)).collect();

        let (p_dice, p_assd, p_rve, significant) = if i == matrix.baseline_index {
            (None, None, None, false)
        } else {
            let td = paired_ttest(&dice, &base_dice).ok();
            let ta = paired_optional(&assd, &base_assd);
            let tr = paired_optional(&rve, &base_rve);
            let mean_d = summarize(&dice_opt).mean;
            let mean_base = summarize(&base_dice.iter().map(|&v| Some(v)).collect::<Vec<_>>()).mean;
            let sig = td
                .as_ref()
                .map(|t| t.p < 0.05 && mean_d > mean_base)
                .unwrap_or(false);
            (
                td.map(|t| t.p),
                ta.map(|t| t.p),
                tr.map(|t| t.p),
                sig,
            )
        };

        rows.push(CellResult {
            label: cell.display_label(),
            variant: cell.variant,
            attention: cell.attention,
            lambda: cell.lambda,
            dice: summarize(&dice_opt),
            assd_mm: summarize(&assd),
            rve_pct: summarize(&rve),
            dice_values: dice,
            assd_values: assd,
            rve_values: rve,
            p_dice_vs_baseline: p_dice,
            p_assd_vs_baseline: p_assd,
            p_rve_vs_baseline: p_rve,
            significant_dice: significant,
        });
    }

    let results = AblationResults {
        baseline_index: matrix.baseline_index,
        seeds: seeds.to_vec(),
        rows,
    };
    fs::write(
        out_dir.join("results.json"),
        serde_json::to_string_pretty(&results)?,
    )?;
    fs::write(out_dir.join("results.csv"), results_csv(&results))?;
    Ok(results)
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// Table in the shape of the reported results: mean±std per metric plus
/// significance marks against the baseline row.
pub fn results_csv(results: &AblationResults) -> String {
    let mut out = String::from(
        "label,variant,attention,lambda,dice_mean,dice_std,assd_mean,assd_std,assd_n_undefined,rve_mean,rve_std,p_dice_vs_baseline,p_assd_vs_baseline,p_rve_vs_baseline,significant_dice\n",
    );
    for r in &results.rows {
        let fmt_p = |p: Option<f64>| p.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{:?},{:?},{},{:.6},{:.6},{:.6},{:.6},{},{:.6},{:.6},{},{},{},{}\n",
            r.label,
            r.variant,
            r.attention,
            r.lambda,
            r.dice.mean,
            r.dice.std,
            r.assd_mm.mean,
            r.assd_mm.std,
            r.assd_mm.n_undefined,
            r.rve_pct.mean,
            r.rve_pct.std,
            fmt_p(r.p_dice_vs_baseline),
            fmt_p(r.p_assd_vs_baseline),
            fmt_p(r.p_rve_vs_baseline),
            if r.significant_dice { "*" } else { "" },
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub dice: Summary,
    pub assd_mm: Summary,
    pub rve_pct: Summary,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResults {
    pub seeds: Vec<u64>,
    pub points: Vec<SweepPoint>,
}

/// Trains one run per lambda (per seed) with everything else shared and
/// aggregates test metrics; mirrors the hardness-weighting sweep figure.
pub fn sweep_lambda(
    lambdas: &[f64],
    base: &TrainConfig,
    manifest: &Manifest,
    seeds: &[u64],
    out_dir: &Path,
) -> Result<SweepResults> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("need at least one lambda".into()));
    }
    for (i, &l) in lambdas.iter().enumerate() {
        if !(0.0..=1.0).contains(&l) {
            return Err(Error::InvalidArgument(format!("lambda {l} not in [0, 1]")));
        }
        if lambdas[..i].contains(&l) {
            return Err(Error::InvalidArgument(format!("duplicate lambda {l}")));
        }
    }
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }
    fs::create_dir_all(out_dir)?;

    let mut points = Vec::new();
    for &lambda in lambdas {
        let mut rows: Vec<CaseMetrics> = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.hdl.lambda = lambda;
            cfg.seed = seed;
            let run_dir = out_dir.join(format!("lambda_{lambda}/seed_{seed}"));
            let record = train(&cfg, manifest, &run_dir)?;
            let (mut net, _) = load_checkpoint(&record.best_checkpoint)?;
            rows.extend(evaluate(&mut net, &cfg, manifest, Split::Test)?);
        }
        let dice: Vec<Option<f64>> = rows.iter().map(|r| Some(r.dice)).collect();
        let assd: Vec<Option<f64>> = rows.iter().map(|r| r.assd_mm).collect();
        let rve: Vec<Option<f64>> = rows.iter().map(|r| r.rve_pct).collect();
        points.push(SweepPoint {
            lambda,
            dice: summarize(&dice),
            assd_mm: summarize(&assd),
            rve_pct: summarize(&rve),
        });
    }

    let results = SweepResults {
        seeds: seeds.to_vec(),
        points,
    };
    fs::write(
        out_dir.join("sweep.json"),
        serde_json::to_string_pretty(&results)?,
    )?;
    fs::write(out_dir.join("sweep.csv"), sweep_csv(&results))?;
    Ok(results)
}

/// Plot-ready CSV with lambda on the x-axis.
pub fn sweep_csv(results: &SweepResults) -> String {
    let mut out =
        String::from("lambda,dice_mean,dice_std,assd_mean,assd_std,rve_mean,rve_std\n");
    for p in &results.points {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            p.lambda, p.dice.mean, p.dice.std, p.assd_mm.mean, p.assd_mm.std, p.rve_pct.mean,
            p.rve_pct.std
        ));
    }
    out
}
