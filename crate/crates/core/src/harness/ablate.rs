//! Six-variant cumulative ablation and gate-utilization measurement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::hexgrid::CellIndex;

use super::config::HarnessConfig;
use super::model::{Model, Prepared, Variant};
use super::train::{evaluate, train, EvalOutput, GridPoint, History};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub f1: f64,
    pub ece: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub mean_sigma: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub gate_grid: Vec<GridPoint>,
    pub histories: BTreeMap<String, History>,
    #[serde(skip)]
    pub full: Option<(Model, EvalOutput)>,
}

fn row(variant: Variant, out: &EvalOutput, best_epoch: usize) -> AblationRow {
    let r = &out.report;
    AblationRow {
        variant,
        label: variant.label().to_string(),
        f1: r.f1,
        ece: r.ece,
        accuracy: r.accuracy,
        precision: r.precision,
        recall: r.recall,
        mean_sigma: r.mean_sigma,
        best_epoch,
    }
}

/// Trains each cumulative variant and scores it on the test split.
///
/// The MC-dropout row differs from the sparse-global row only at inference,
/// so it reuses those trained parameters.
pub fn ablate(prep: &Prepared, cfg: &HarnessConfig) -> Result<AblationResult> {
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    let mut histories = BTreeMap::new();
    let mut gate_grid = Vec::new();
    let mut sparse: Option<(Model, usize)> = None;
    let mut full = None;
    for v in Variant::ALL {
        let (model, best_epoch) = if v == Variant::PlusMcDropout {
            let (m, e) = sparse.clone().ok_or_else(|| invalid!("sparse variant must precede MC dropout"))?;
            (Model { variant: v, ..m }, e)
        } else {
            let out = train(prep, v, cfg)?;
            histories.insert(v.key().to_string(), out.history.clone());
            if v.has_gating() {
                gate_grid = out.grid;
            }
            (out.model, out.history.best_epoch)
        };
        let test = evaluate(&model, prep, prep.split.test(), 1)?;
        log::info!("{}: test f1 {:.4} ece {:.4}", v, test.report.f1, test.report.ece);
        rows.push(row(v, &test, best_epoch));
        if v == Variant::PlusSparseGlobal {
            sparse = Some((model, best_epoch));
        } else if v == Variant::PlusAdaptiveGating {
            full = Some((model, test));
        }
    }
    Ok(AblationResult { rows, gate_grid, histories, full })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    pub p6_high: f64,
    pub p6_low: f64,
    pub gap: f64,
    pub n_high: usize,
    pub n_low: usize,
}

/// `P(w = 6 | high-volatility cell) − P(w = 6 | low-volatility cell)` over
/// evaluated (target, node) pairs.
pub fn gate_utilization(out: &EvalOutput, prep: &Prepared, high_vol: &BTreeMap<CellIndex, bool>) -> Result<Utilization> {
    let n = prep.n();
    let (mut hi6, mut hi, mut lo6, mut lo) = (0usize, 0usize, 0usize, 0usize);
    for (k, &w) in out.windows.iter().enumerate() {
        let cell = &prep.cells[k % n];
        let high = *high_vol.get(cell).ok_or_else(|| invalid!("no regime for {cell}"))?;
        if high {
            hi += 1;
            hi6 += usize::from(w == 6);
        } else {
            lo += 1;
            lo6 += usize::from(w == 6);
        }
    }
    if hi == 0 || lo == 0 {
        return Err(invalid!("utilization needs both regimes ({hi} high, {lo} low)"));
    }
    let p6_high = hi6 as f64 / hi as f64;
    let p6_low = lo6 as f64 / lo as f64;
    Ok(Utilization { p6_high, p6_low, gap: p6_high - p6_low, n_high: hi, n_low: lo })
}
