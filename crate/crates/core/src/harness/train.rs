//! Training loop, evaluation and validation search over gate thresholds.

use std::ops::Range;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamW, DropoutKey, Graph, ParamStore, Tensor, Var};
use crate::encoders::{fit_thresholds, fit_thresholds_at, select_window, GateThresholds};
use crate::error::{invalid, Error, Result};
use crate::headcalib::{class_weights_from, head_graph, mc_dropout_predict_batch, ClassWeights, EvalReport, Prediction};

use super::config::HarnessConfig;
use super::model::{
    encode_hours, encode_tiles, forward, init_params, node_features, spatial_stage, volatility_at, Model, Prepared,
    Variant, WindowRule, FIXED_WINDOW, WINDOWS,
};

/// Target hours per evaluation graph.
const EVAL_CHUNK: usize = 24;
const TRAIN_STREAM: u64 = 0x7472_6169_6e00;
const MC_STREAM: u64 = 0x6d63_0000_0000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss; absent for the pre-training evaluation.
    pub train_loss: Option<f64>,
    pub val_f1: f64,
    pub val_ece: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimiser step.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
}

/// Predictions for `targets × nodes` in target-major order.
#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub targets: Vec<usize>,
    pub preds: Vec<Prediction>,
    pub labels: Vec<u8>,
    pub windows: Vec<usize>,
}

pub fn new_model(prep: &Prepared, variant: Variant, cfg: &HarnessConfig) -> Result<Model> {
    cfg.validate()?;
    let store = init_params(cfg, prep.in_dim, cfg.seed)?;
    Ok(Model { variant, cfg: cfg.clone(), store, thresholds: None })
}

/// Window rule used at evaluation: the gate when enabled, otherwise fixed.
pub fn eval_rule(model: &Model) -> Result<WindowRule> {
    if model.variant.has_gating() {
        let th = model.thresholds.ok_or_else(|| invalid!("gated model has no fitted thresholds"))?;
        Ok(WindowRule::Gate(th))
    } else {
        Ok(WindowRule::Fixed(FIXED_WINDOW))
    }
}

/// Head outputs for node states `z: [W, N, d]`; MC passes when enabled.
fn predict(g: &mut Graph<f64>, model: &Model, z: Var, mc_seed: u64) -> Result<Vec<Prediction>> {
    if model.variant.has_mc() {
        let zt = g.value(z).clone();
        let d = zt.cols();
        let rows = zt.len() / d;
        let zt = zt.reshape(&[rows, d])?;
        mc_dropout_predict_batch(&zt, &model.store, &model.cfg.head(), model.cfg.mc_passes, mc_seed)
    } else {
        let p = head_graph(g, &model.store, &model.cfg.head(), z)?;
        g.value(p).data().iter().map(|&v| Prediction::from_passes(&[v])).collect()
    }
}

fn mc_seed(cfg: &HarnessConfig, first_target: usize) -> u64 {
    cfg.seed ^ MC_STREAM ^ first_target as u64
}

pub fn evaluate(model: &Model, prep: &Prepared, hours: Range<usize>, stride: usize) -> Result<EvalOutput> {
    let rule = eval_rule(model)?;
    let targets: Vec<usize> = hours.step_by(stride.max(1)).collect();
    if targets.is_empty() {
        return Err(invalid!("empty evaluation range"));
    }
    let mut preds = Vec::with_capacity(targets.len() * prep.n());
    let mut windows = Vec::with_capacity(targets.len() * prep.n());
    for chunk in targets.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let (x, ws) = node_features(&mut g, model, prep, chunk, &rule)?;
        let z = spatial_stage(&mut g, model, prep, x)?;
        preds.extend(predict(&mut g, model, z, mc_seed(&model.cfg, chunk[0]))?);
        windows.extend(ws);
    }
    let labels = prep.target_labels(&targets);
    let report = EvalReport::compute(&preds, &labels, model.cfg.threshold, model.cfg.ece_bins)?;
    Ok(EvalOutput { report, targets, preds, labels, windows })
}

/// Volatility pre-scores for every node at each of `hours`, hour-major.
pub fn gate_scores(model: &Model, prep: &Prepared, hours: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(hours.len() * prep.n());
    for chunk in hours.chunks(EVAL_CHUNK * 4) {
        let mut g = Graph::new();
        let ht = encode_hours(&mut g, model, prep, chunk)?;
        let vis = encode_tiles(&mut g, model, prep)?;
        for &h in chunk {
            out.extend(volatility_at(&g, &ht, vis, prep, h));
        }
    }
    Ok(out)
}

fn gate_fit_hours(model: &Model, prep: &Prepared) -> Vec<usize> {
    prep.split.train().step_by(model.cfg.gate_fit_stride).collect()
}

/// Fits the gate at the 33rd / 67th percentiles of training-split scores.
pub fn fit_gate(model: &Model, prep: &Prepared) -> Result<GateThresholds> {
    fit_thresholds(&gate_scores(model, prep, &gate_fit_hours(model, prep))?)
}

pub fn train_class_weights(prep: &Prepared) -> Result<ClassWeights> {
    let targets: Vec<usize> = prep.split.train().collect();
    class_weights_from(&prep.target_labels(&targets))
}

/// One optimiser step on `targets`; returns the loss.
pub fn train_step(
    model: &mut Model,
    prep: &Prepared,
    opt: &mut AdamW<f64>,
    weights: &ClassWeights,
    targets: &[usize],
    rule: &WindowRule,
    key: DropoutKey,
) -> Result<f64> {
    let mut g = Graph::new().with_dropout(key);
    let (p, _) = forward(&mut g, model, prep, targets, rule)?;
    let y: Vec<f64> = prep.target_labels(targets).into_iter().map(f64::from).collect();
    let loss = g.weighted_bce(p, &y, weights.w0, weights.w1)?;
    let lv = g.value(loss).data()[0];
    if !lv.is_finite() {
        return Err(Error::Divergence(format!(
            "loss {lv} at step {} (variant {}, targets {:?})",
            opt.steps_taken() + 1,
            model.variant,
            targets
        )));
    }
    model.store.zero_grad();
    let grads = g.backward(loss)?;
    grads.accumulate_into(&g, &mut model.store);
    opt.step(&mut model.store);
    Ok(lv)
}

/// Epoch schedule shared by training and fine-tuning.
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub epochs: usize,
    /// Stop after this many epochs without a validation-F1 improvement.
    pub patience: Option<usize>,
    /// Evaluate the starting parameters as epoch 0 and allow keeping them.
    pub include_start: bool,
    pub refit_gate: bool,
    pub seed: u64,
}

/// Runs the schedule and leaves `model` at the best validation-F1 epoch.
/// Also returns the parameters as they were after the last epoch run.
pub fn run_epochs(model: &mut Model, prep: &Prepared, sched: Schedule) -> Result<(History, ParamStore<f64>)> {
    let cfg = model.cfg.clone();
    let weights = train_class_weights(prep)?;
    let mut opt = AdamW::new(cfg.lr_numeric, cfg.lr_visual, cfg.lr_other, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed ^ TRAIN_STREAM);
    let train = prep.split.train();
    let per_step = cfg.windows_per_step.min(train.len());
    let mut hist = History::default();
    let mut best: Option<(f64, ParamStore<f64>, Option<GateThresholds>)> = None;

    if sched.include_start {
        let val = evaluate(model, prep, prep.split.val(), cfg.val_stride)?.report;
        hist.epochs.push(EpochRecord { epoch: 0, train_loss: None, val_f1: val.f1, val_ece: val.ece });
        best = Some((val.f1, model.store.clone(), model.thresholds));
    }
    let mut stale = 0;
    for epoch in 1..=sched.epochs {
        let mut total = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let mut targets: Vec<usize> = sample(&mut rng, train.len(), per_step).into_iter().map(|k| train.start + k).collect();
            targets.sort_unstable();
            let w = if model.variant.has_gating() { WINDOWS[rng.random_range(0..WINDOWS.len())] } else { FIXED_WINDOW };
            let key = DropoutKey { seed: sched.seed, call: opt.steps_taken() };
            let loss = train_step(model, prep, &mut opt, &weights, &targets, &WindowRule::Fixed(w), key)?;
            hist.step_losses.push(loss);
            total += loss;
        }
        if model.variant.has_gating() && sched.refit_gate {
            model.thresholds = Some(fit_gate(model, prep)?);
        }
        let val = evaluate(model, prep, prep.split.val(), cfg.val_stride)?.report;
        let train_loss = total / cfg.steps_per_epoch as f64;
        log::info!("{} epoch {epoch}: loss {train_loss:.4} val f1 {:.4} ece {:.4}", model.variant, val.f1, val.ece);
        hist.epochs.push(EpochRecord { epoch, train_loss: Some(train_loss), val_f1: val.f1, val_ece: val.ece });
        if best.as_ref().is_none_or(|b| val.f1 > b.0) {
            best = Some((val.f1, model.store.clone(), model.thresholds));
            hist.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if sched.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }
    let last = model.store.clone();
    if let Some((_, store, th)) = best {
        model.store = store;
        model.thresholds = th;
    }
    Ok((hist, last))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub low_pct: u32,
    pub high_pct: u32,
    pub tau_low: f64,
    pub tau_high: f64,
    pub val_f1: f64,
    pub val_ece: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: History,
    /// Gate-threshold search results, empty for ungated variants.
    pub grid: Vec<GridPoint>,
}

pub fn train(prep: &Prepared, variant: Variant, cfg: &HarnessConfig) -> Result<TrainOutcome> {
    let mut model = new_model(prep, variant, cfg)?;
    if variant.has_gating() {
        model.thresholds = Some(fit_gate(&model, prep)?);
    }
    let sched = Schedule { epochs: cfg.epochs, patience: None, include_start: false, refit_gate: true, seed: cfg.seed };
    let (history, _) = run_epochs(&mut model, prep, sched)?;
    let grid = if variant.has_gating() { tune_gate(&mut model, prep)? } else { Vec::new() };
    Ok(TrainOutcome { model, history, grid })
}

const OFFSETS: [i32; 5] = [0, -5, 5, -10, 10];

/// Searches percentile offsets around 33 / 67 on the validation split,
/// maximising F1 with lower ECE as tie-break, and installs the winner.
///
/// Node features are computed once per window length and reused across
/// the grid; only the spatial stage and head run per grid point.
pub fn tune_gate(model: &mut Model, prep: &Prepared) -> Result<Vec<GridPoint>> {
    let u_fit = gate_scores(model, prep, &gate_fit_hours(model, prep))?;
    let targets: Vec<usize> = prep.split.val().collect();
    let u_val = gate_scores(model, prep, &targets)?;
    let n = prep.n();
    let chunks: Vec<&[usize]> = targets.chunks(EVAL_CHUNK).collect();
    let mut cache: Vec<Vec<Tensor<f64>>> = Vec::with_capacity(chunks.len());
    for chunk in &chunks {
        let mut per_w = Vec::with_capacity(WINDOWS.len());
        for w in WINDOWS {
            let mut g = Graph::new();
            let (x, _) = node_features(&mut g, model, prep, chunk, &WindowRule::Fixed(w))?;
            per_w.push(g.value(x).clone());
        }
        cache.push(per_w);
    }
    let labels = prep.target_labels(&targets);
    let mut grid = Vec::new();
    let mut best: Option<(usize, GateThresholds)> = None;
    for dl in OFFSETS {
        for dh in OFFSETS {
            let (lp, hp) = ((33 + dl) as u32, (67 + dh) as u32);
            let th = fit_thresholds_at(&u_fit, lp, hp)?;
            let mut preds = Vec::with_capacity(labels.len());
            let mut offset = 0;
            for (chunk, per_w) in chunks.iter().zip(&cache) {
                let width = per_w[0].cols();
                let mut data = Vec::with_capacity(chunk.len() * n * width);
                for k in 0..chunk.len() * n {
                    let w = select_window(u_val[offset + k], &th);
                    let src = &per_w[WINDOWS.iter().position(|&x| x == w).unwrap()];
                    data.extend_from_slice(&src.data()[k * width..(k + 1) * width]);
                }
                offset += chunk.len() * n;
                let mut g = Graph::new();
                let x = g.constant(Tensor::new(vec![chunk.len(), n, width], data)?);
                let z = spatial_stage(&mut g, model, prep, x)?;
                preds.extend(predict(&mut g, model, z, mc_seed(&model.cfg, chunk[0]))?);
            }
            let r = EvalReport::compute(&preds, &labels, model.cfg.threshold, model.cfg.ece_bins)?;
            let better = best.as_ref().is_none_or(|&(i, _)| {
                let b: &GridPoint = &grid[i];
                r.f1 > b.val_f1 || (r.f1 == b.val_f1 && r.ece < b.val_ece)
            });
            if better {
                best = Some((grid.len(), th));
            }
            grid.push(GridPoint {
                low_pct: lp,
                high_pct: hp,
                tau_low: th.tau_low,
                tau_high: th.tau_high,
                val_f1: r.f1,
                val_ece: r.ece,
            });
        }
    }
    model.thresholds = best.map(|b| b.1);
    Ok(grid)
}
