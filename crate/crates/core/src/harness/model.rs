//! Model assembly: encoders, fusion, spatial layers and head wired per
//! ablation variant, over a dataset prepared for batched access.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::nn::xavier;
use crate::diffcore::{Graph, ParamStore, Tensor, Var};
use crate::encoders::{
    column_spread, init_numeric_encoder, init_visual_encoder, numeric_input, numeric_input_width, numeric_tokens,
    select_window, visual_tokens, GateThresholds, Tile,
};
use crate::error::{invalid, shape_err, Error, Result};
use crate::fusion::{fuse_graph, init_fusion};
use crate::headcalib::{head_graph, init_head};
use crate::hexgrid::CellIndex;
use crate::pipeline::Dataset;
use crate::spatial::{adjacency_bias, build_mask_range, gat_graph, init_gat, init_sparse, sparse_attention_graph, SparseMask};

use super::config::HarnessConfig;

/// Look-back windows the gate can choose from.
pub const WINDOWS: [usize; 3] = [1, 3, 6];
pub const FIXED_WINDOW: usize = 3;
pub const MAX_WINDOW: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    PlusLocalGat,
    PlusFusion,
    PlusSparseGlobal,
    PlusMcDropout,
    PlusAdaptiveGating,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::PlusLocalGat,
        Variant::PlusFusion,
        Variant::PlusSparseGlobal,
        Variant::PlusMcDropout,
        Variant::PlusAdaptiveGating,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::PlusLocalGat => "+ Local GAT",
            Variant::PlusFusion => "+ Cross-Modal Fusion",
            Variant::PlusSparseGlobal => "+ Sparse Global Attention",
            Variant::PlusMcDropout => "+ MC-Dropout Calibration",
            Variant::PlusAdaptiveGating => "+ Adaptive Gating",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::PlusLocalGat => "gat",
            Variant::PlusFusion => "fusion",
            Variant::PlusSparseGlobal => "sparse",
            Variant::PlusMcDropout => "mc",
            Variant::PlusAdaptiveGating => "full",
        }
    }

    fn rank(self) -> usize {
        Variant::ALL.iter().position(|&v| v == self).unwrap()
    }

    pub fn has_gat(self) -> bool {
        self.rank() >= 1
    }

    pub fn has_fusion(self) -> bool {
        self.rank() >= 2
    }

    pub fn has_sparse(self) -> bool {
        self.rank() >= 3
    }

    pub fn has_mc(self) -> bool {
        self.rank() >= 4
    }

    pub fn has_gating(self) -> bool {
        self.rank() >= 5
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| Error::Parse(format!("unknown variant `{s}` (expected baseline|gat|fusion|sparse|mc|full)")))
    }
}

/// One connected region: its node range and precomputed masks.
#[derive(Clone, Debug)]
pub struct RegionBlock {
    pub name: String,
    pub nodes: Range<usize>,
    pub adjacency: Tensor<f64>,
    pub mask: SparseMask,
}

/// Chronological split over hour indices; targets start once a full
/// look-back window exists.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub first: usize,
    pub train_end: usize,
    pub val_end: usize,
    pub hours: usize,
}

impl Split {
    pub fn chronological(hours: usize) -> Result<Self> {
        let train_end = hours * 70 / 100;
        let val_end = hours * 85 / 100;
        let first = MAX_WINDOW - 1;
        if train_end <= first || val_end <= train_end || hours <= val_end {
            return Err(invalid!("{hours} hours is too short for a 70/15/15 split"));
        }
        Ok(Self { first, train_end, val_end, hours })
    }

    pub fn train(&self) -> Range<usize> {
        self.first..self.train_end
    }

    pub fn val(&self) -> Range<usize> {
        self.train_end..self.val_end
    }

    pub fn test(&self) -> Range<usize> {
        self.val_end..self.hours
    }
}

/// Dense, model-ready view of a complete, aligned dataset.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub cells: Vec<CellIndex>,
    pub hours: usize,
    pub in_dim: usize,
    /// `[node][hour][in_dim]`.
    x: Vec<f64>,
    pub times: Vec<i64>,
    /// `[node][hour]`.
    pub labels: Vec<u8>,
    /// `[N, P, s²]`.
    pub patches: Tensor<f64>,
    pub regions: Vec<RegionBlock>,
    pub split: Split,
}

impl Prepared {
    pub fn new(ds: &Dataset, tiles: &BTreeMap<CellIndex, Tile>, cfg: &HarnessConfig) -> Result<Self> {
        if !ds.is_aligned() {
            return Err(invalid!("dataset cells do not share a timeline"));
        }
        let topo = &ds.topology;
        let cells = topo.cells().to_vec();
        let times = ds.timeline();
        let hours = times.len();
        let in_dim = numeric_input_width(ds.feature_names.len());
        let mut x = Vec::with_capacity(cells.len() * hours * in_dim);
        let mut labels = Vec::with_capacity(cells.len() * hours);
        for c in &cells {
            let ws = ds.series.get(c).ok_or_else(|| invalid!("no series for {c}"))?;
            for w in ws {
                x.extend(numeric_input(w, &ds.stats)?);
                labels.push(w.y);
            }
        }
        let enc = cfg.encoder();
        let mut patches = Vec::new();
        for c in &cells {
            let t = tiles.get(c).ok_or_else(|| invalid!("no tile for {c}"))?;
            patches.extend_from_slice(t.patches::<f64>(&enc)?.data());
        }
        let s = enc.patch_side()?;
        let patches = Tensor::new(vec![cells.len(), enc.p_tokens, s * s], patches)?;
        let regions = topo
            .region_ranges()
            .into_iter()
            .map(|(name, nodes)| RegionBlock {
                adjacency: adjacency_bias(topo, nodes.clone()),
                mask: build_mask_range(topo, nodes.clone(), cfg.globals),
                name,
                nodes,
            })
            .collect();
        Ok(Self { cells, hours, in_dim, x, times, labels, patches, regions, split: Split::chronological(hours)? })
    }

    pub fn n(&self) -> usize {
        self.cells.len()
    }

    pub fn input(&self, node: usize, hour: usize) -> &[f64] {
        let o = (node * self.hours + hour) * self.in_dim;
        &self.x[o..o + self.in_dim]
    }

    pub fn label(&self, node: usize, hour: usize) -> u8 {
        self.labels[node * self.hours + hour]
    }

    /// Labels for `targets × nodes` in target-major order.
    pub fn target_labels(&self, targets: &[usize]) -> Vec<u8> {
        targets.iter().flat_map(|&t| (0..self.n()).map(move |i| self.label(i, t))).collect()
    }
}

/// Parameters for every component, initialised in a fixed order so that all
/// variants start from the same values for a given seed.
pub fn init_params(cfg: &HarnessConfig, in_dim: usize, seed: u64) -> Result<ParamStore<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let enc = cfg.encoder();
    init_numeric_encoder(&mut store, &mut rng, &enc, in_dim);
    init_visual_encoder(&mut store, &mut rng, &enc)?;
    init_fusion(&mut store, &mut rng, cfg.d, &cfg.fusion());
    store.insert("proj.w", xavier(&mut rng, 2 * cfg.d, cfg.d, &[2 * cfg.d, cfg.d]));
    init_gat(&mut store, &mut rng, cfg.d);
    init_sparse(&mut store, &mut rng, cfg.d, &cfg.spatial());
    init_head(&mut store, &mut rng, cfg.d, &cfg.head());
    Ok(store)
}

#[derive(Clone, Debug)]
pub struct Model {
    pub variant: Variant,
    pub cfg: HarnessConfig,
    pub store: ParamStore<f64>,
    pub thresholds: Option<GateThresholds>,
}

/// How the look-back window of each (target hour, node) is chosen.
#[derive(Clone, Debug)]
pub enum WindowRule {
    Fixed(usize),
    Gate(GateThresholds),
}

/// Encoded hours: numeric tokens `[N·H, T, d]` for a sorted set of hours.
pub struct HourTokens {
    pub tokens: Var,
    pos: BTreeMap<usize, usize>,
}

impl HourTokens {
    pub fn index(&self, node: usize, hour: usize) -> usize {
        node * self.pos.len() + self.pos[&hour]
    }
}

/// Encodes every node at each of `hours`.
pub fn encode_hours(g: &mut Graph<f64>, model: &Model, prep: &Prepared, hours: &[usize]) -> Result<HourTokens> {
    let n = prep.n();
    let mut data = Vec::with_capacity(n * hours.len() * prep.in_dim);
    let mut times = Vec::with_capacity(n * hours.len());
    for i in 0..n {
        for &h in hours {
            data.extend_from_slice(prep.input(i, h));
            times.push(prep.times[h]);
        }
    }
    let x = g.constant(Tensor::new(vec![n * hours.len(), 1, prep.in_dim], data)?);
    let tokens = numeric_tokens(g, &model.store, &model.cfg.encoder(), x, &times)?;
    Ok(HourTokens { tokens, pos: hours.iter().enumerate().map(|(k, &h)| (h, k)).collect() })
}

pub fn encode_tiles(g: &mut Graph<f64>, model: &Model, prep: &Prepared) -> Result<Var> {
    let p = g.constant(prep.patches.clone());
    visual_tokens(g, &model.store, &model.cfg.encoder(), p)
}

/// `u` for every node at `hour`, from already encoded tokens.
pub fn volatility_at(g: &Graph<f64>, ht: &HourTokens, vis: Var, prep: &Prepared, hour: usize) -> Vec<f64> {
    let num = g.value(ht.tokens);
    let (_, t, d) = num.dims3();
    let v = g.value(vis);
    let (_, p, _) = v.dims3();
    (0..prep.n())
        .map(|i| {
            let k = ht.index(i, hour);
            let sn = column_spread(&num.data()[k * t * d..(k + 1) * t * d], t, d);
            let sv = column_spread(&v.data()[i * p * d..(i + 1) * p * d], p, d);
            0.5 * (sn + sv)
        })
        .collect()
}

/// Per-node representations `[W, N, 2d]` for `targets`, plus the window
/// chosen for each (target, node) in target-major order.
pub fn node_features(
    g: &mut Graph<f64>,
    model: &Model,
    prep: &Prepared,
    targets: &[usize],
    rule: &WindowRule,
) -> Result<(Var, Vec<usize>)> {
    let n = prep.n();
    let reach = match rule {
        WindowRule::Fixed(w) => *w,
        WindowRule::Gate(_) => MAX_WINDOW,
    };
    let mut hours = std::collections::BTreeSet::new();
    for &t in targets {
        let lo = (t + 1).checked_sub(reach).ok_or_else(|| invalid!("target hour {t} precedes a full window"))?;
        if t >= prep.hours {
            return Err(invalid!("target hour {t} beyond {} hours", prep.hours));
        }
        hours.extend(lo..=t);
    }
    if hours.is_empty() {
        return Err(invalid!("no target hours"));
    }
    let ht = encode_hours(g, model, prep, &hours.into_iter().collect::<Vec<_>>())?;
    let vis = encode_tiles(g, model, prep)?;

    let ws: Vec<usize> = match rule {
        WindowRule::Fixed(w) => vec![*w; targets.len() * n],
        WindowRule::Gate(th) => targets
            .iter()
            .flat_map(|&t| volatility_at(g, &ht, vis, prep, t).into_iter().map(|u| select_window(u, th)))
            .collect(),
    };
    let x = assemble(g, model, prep, targets, &ht, vis, &ws)?;
    Ok((x, ws))
}

/// Groups (target, node) pairs by window length, runs fusion (or pooling)
/// per group and restores target-major order as `[W, N, 2d]`.
fn assemble(
    g: &mut Graph<f64>,
    model: &Model,
    prep: &Prepared,
    targets: &[usize],
    ht: &HourTokens,
    vis: Var,
    ws: &[usize],
) -> Result<Var> {
    let n = prep.n();
    let cfg = &model.cfg;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, &w) in ws.iter().enumerate() {
        groups.entry(w).or_default().push(k);
    }
    let mut parts = Vec::new();
    let mut order = Vec::with_capacity(ws.len());
    for (&w, members) in &groups {
        let mut idx = Vec::with_capacity(members.len() * w);
        let mut nodes = Vec::with_capacity(members.len());
        for &k in members {
            let (t, i) = (targets[k / n], k % n);
            for h in t + 1 - w..=t {
                idx.push(ht.index(i, h));
            }
            nodes.push(i);
        }
        let b = members.len();
        let num = g.gather_batch(ht.tokens, &idx)?;
        let num = g.reshape(num, &[b, w * cfg.t_tokens, cfg.d])?;
        let v = g.gather_batch(vis, &nodes)?;
        let (pn, pv) = if model.variant.has_fusion() {
            fuse_graph(g, &model.store, &cfg.fusion(), num, v)?
        } else {
            (g.mean_rows(num)?, g.mean_rows(v)?)
        };
        parts.push(g.concat_cols(&[pn, pv])?);
        order.extend_from_slice(members);
    }
    let all = if parts.len() == 1 { parts[0] } else { g.concat_batch(&parts)? };
    let mut inv = vec![0; order.len()];
    for (pos, &k) in order.iter().enumerate() {
        inv[k] = pos;
    }
    let identity = inv.iter().enumerate().all(|(a, &b)| a == b);
    let x = if identity { all } else { g.gather_batch(all, &inv)? };
    g.reshape(x, &[targets.len(), n, 2 * cfg.d])
}

/// Spatial stage: `[W, N, 2d]` → `[W, N, d]`.
pub fn spatial_stage(g: &mut Graph<f64>, model: &Model, prep: &Prepared, x: Var) -> Result<Var> {
    let v = model.variant;
    let cfg = &model.cfg;
    if g.value(x).cols() != 2 * cfg.d {
        return Err(shape_err!("node features width {} != {}", g.value(x).cols(), 2 * cfg.d));
    }
    if !v.has_gat() {
        let w = g.param(&model.store, "proj.w")?;
        let z = g.matmul(x, w)?;
        return Ok(g.relu(z));
    }
    let mut outs = Vec::with_capacity(prep.regions.len());
    for r in &prep.regions {
        let xr = if prep.regions.len() == 1 { x } else { g.slice_rows(x, r.nodes.start, r.nodes.len())? };
        let (mut z, _) = gat_graph(g, &model.store, xr, &r.adjacency, cfg.leaky_slope)?;
        if v.has_sparse() {
            z = sparse_attention_graph(g, &model.store, &cfg.spatial(), z, &r.mask)?;
        }
        outs.push(z);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_rows(&outs)
    }
}

/// Full forward to probabilities `[W, N, 1]`; dropout follows the graph's key.
pub fn forward(
    g: &mut Graph<f64>,
    model: &Model,
    prep: &Prepared,
    targets: &[usize],
    rule: &WindowRule,
) -> Result<(Var, Vec<usize>)> {
    let (x, ws) = node_features(g, model, prep, targets, rule)?;
    let z = spatial_stage(g, model, prep, x)?;
    Ok((head_graph(g, &model.store, &model.cfg.head(), z)?, ws))
}
