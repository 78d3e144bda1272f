//! Classification head, class-weighted loss, MC-dropout prediction and the
//! evaluation metrics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::nn::{init_linear, linear};
use crate::diffcore::rng::site_id;
use crate::diffcore::{DropoutKey, Graph, ParamStore, Tensor, Var};
use crate::error::{invalid, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: 16, dropout: 0.2 }
    }
}

pub fn init_head<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, d: usize, cfg: &HeadConfig) {
    init_linear(store, rng, "head.l1", d, cfg.hidden, true);
    init_linear(store, rng, "head.l2", cfg.hidden, 1, true);
}

/// `sigmoid(dropout(relu(z W1 + b1)) W2 + b2)`; `z: [.., d]` → `[.., 1]`.
///
/// Dropout is active only when the graph carries a dropout key.
pub fn head_graph<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &HeadConfig, z: Var) -> Result<Var> {
    let h = linear(g, store, "head.l1", z)?;
    let h = g.relu(h);
    let h = g.dropout(h, cfg.dropout, site_id("head.dropout"))?;
    let o = linear(g, store, "head.l2", h)?;
    Ok(g.sigmoid(o))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w0: f64,
    pub w1: f64,
}

/// `w_c = n / (2 n_c)`.
pub fn class_weights_from(labels: &[u8]) -> Result<ClassWeights> {
    let n1 = labels.iter().filter(|&&y| y == 1).count();
    let n0 = labels.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(invalid!("class weights need both classes ({n0} negatives, {n1} positives)"));
    }
    let n = labels.len() as f64;
    Ok(ClassWeights { w0: n / (2.0 * n0 as f64), w1: n / (2.0 * n1 as f64) })
}

/// `−w1 y ln ŷ − w0 (1−y) ln(1−ŷ)` with ŷ clamped to `[1e-7, 1 − 1e-7]`.
pub fn weighted_bce(y_hat: f64, y: u8, w: &ClassWeights) -> f64 {
    let p = y_hat.clamp(1e-7, 1.0 - 1e-7);
    if y == 1 {
        -w.w1 * p.ln()
    } else {
        -w.w0 * (1.0 - p).ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub y_hat: f64,
    pub sigma: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Prediction {
    /// Mean and population standard deviation of the passes, `ŷ ± 1.96σ`.
    pub fn from_passes(passes: &[f64]) -> Result<Self> {
        let Some(&first) = passes.first() else {
            return Err(invalid!("need at least one pass"));
        };
        let k = passes.len() as f64;
        // centred on the first pass so identical passes give σ = 0 exactly
        let shift = passes.iter().map(|&p| p - first).sum::<f64>() / k;
        let y_hat = first + shift;
        let var = passes.iter().map(|&p| (p - first - shift).powi(2)).sum::<f64>() / k;
        let sigma = var.sqrt();
        Ok(Self { y_hat, sigma, ci_low: y_hat - 1.96 * sigma, ci_high: y_hat + 1.96 * sigma })
    }
}

/// `K` stochastic head passes over `z: [n, d]`; pass `k` uses dropout key
/// `(seed, k)`. With `p = 0` or `K = 1` a single deterministic pass is used.
pub fn mc_dropout_predict_batch<T: Scalar>(
    z: &Tensor<T>,
    store: &ParamStore<T>,
    cfg: &HeadConfig,
    k: usize,
    seed: u64,
) -> Result<Vec<Prediction>> {
    if k == 0 {
        return Err(invalid!("K must be at least 1"));
    }
    let stochastic = cfg.dropout > 0.0 && k > 1;
    let passes = if stochastic { k } else { 1 };
    let n = z.rows();
    let mut outs = vec![Vec::with_capacity(passes); n];
    for pass in 0..passes {
        let mut g = Graph::new();
        if stochastic {
            g.set_dropout(Some(DropoutKey { seed, call: pass as u64 }));
        }
        let x = g.constant(z.clone());
        let y = head_graph(&mut g, store, cfg, x)?;
        for (i, v) in g.value(y).data().iter().enumerate() {
            outs[i].push(v.as_f64());
        }
    }
    outs.iter().map(|p| Prediction::from_passes(p)).collect()
}

pub fn mc_dropout_predict<T: Scalar>(
    z: &Tensor<T>,
    store: &ParamStore<T>,
    cfg: &HeadConfig,
    k: usize,
    seed: u64,
) -> Result<Prediction> {
    let row = z.clone().reshape(&[1, z.len()])?;
    Ok(mc_dropout_predict_batch(&row, store, cfg, k, seed)?[0])
}

/// Expected calibration error over `bins` equal-width bins; the top bin
/// includes 1.0 and empty bins contribute nothing.
pub fn ece(preds: &[f64], labels: &[u8], bins: usize) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(invalid!("ece: {} predictions vs {} labels", preds.len(), labels.len()));
    }
    if bins == 0 {
        return Err(invalid!("ece needs at least one bin"));
    }
    let mut conf = vec![0.0; bins];
    let mut pos = vec![0.0; bins];
    let mut cnt = vec![0usize; bins];
    for (&p, &y) in preds.iter().zip(labels) {
        let b = ((p * bins as f64).floor() as usize).min(bins - 1);
        conf[b] += p;
        pos[b] += y as f64;
        cnt[b] += 1;
    }
    let n = preds.len() as f64;
    Ok((0..bins)
        .filter(|&b| cnt[b] > 0)
        .map(|b| {
            let m = cnt[b] as f64;
            (m / n) * (pos[b] / m - conf[b] / m).abs()
        })
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Harmonic mean; 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Confusion-matrix metrics with `ŷ ≥ threshold` as a positive call.
/// Undefined ratios are reported as 0.
pub fn metrics(preds: &[f64], labels: &[u8], threshold: f64) -> Result<Metrics> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(invalid!("metrics: {} predictions vs {} labels", preds.len(), labels.len()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in preds.iter().zip(labels) {
        match (p >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b > 0 { a as f64 / b as f64 } else { 0.0 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(Metrics {
        accuracy: ratio(tp + tn, preds.len()),
        precision,
        recall,
        f1: f1_score(precision, recall),
    })
}

/// Metrics plus calibration for one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub positives: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ece: f64,
    pub mean_sigma: f64,
}

impl EvalReport {
    pub fn compute(preds: &[Prediction], labels: &[u8], threshold: f64, bins: usize) -> Result<Self> {
        let y: Vec<f64> = preds.iter().map(|p| p.y_hat).collect();
        let m = metrics(&y, labels, threshold)?;
        Ok(Self {
            n: labels.len(),
            positives: labels.iter().filter(|&&v| v == 1).count(),
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            ece: ece(&y, labels, bins)?,
            mean_sigma: preds.iter().map(|p| p.sigma).sum::<f64>() / preds.len().max(1) as f64,
        })
    }

    /// `key=value` lines, reals with six decimals, keys in fixed order.
    pub fn to_kv(&self) -> String {
        format!(
            "n={}\npositives={}\naccuracy={:.6}\nprecision={:.6}\nrecall={:.6}\nf1={:.6}\nece={:.6}\nmean_sigma={:.6}\n",
            self.n, self.positives, self.accuracy, self.precision, self.recall, self.f1, self.ece, self.mean_sigma
        )
    }
}
