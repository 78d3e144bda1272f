//! Central-difference gradient checks over every differentiable layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::nn::{encoder_block, init_encoder_block, init_linear, linear};
use crate::diffcore::{grad_check, grad_check_params, DropoutKey, Graph, ParamStore, Tensor, Var, MASK_BIAS};
use crate::encoders::{init_numeric_encoder, init_visual_encoder, numeric_tokens, visual_tokens, EncoderConfig};
use crate::error::Result;
use crate::fusion::{cross_attend_graph, fuse_graph, init_cross_attn, init_fusion, FusionConfig};
use crate::headcalib::{head_graph, init_head, HeadConfig};
use crate::hexgrid::{build_topology, neighbors, CellIndex};
use crate::spatial::{adjacency_bias, build_mask, gat_graph, init_gat, init_sparse, sparse_attention_graph, SpatialConfig};

use super::config::HarnessConfig;
use super::model::{forward, init_params, Model, Prepared, Variant, WindowRule};
use super::synth::{generate_synth, SynthSpec};

pub const EPS: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| rng.random_range(-scale..scale)).collect::<Vec<_>>()).unwrap()
}

/// Reduces `v` to a scalar through fixed random weights.
fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(v), 1.0);
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum_all(p))
}

fn flower() -> Vec<CellIndex> {
    let c = CellIndex::new("g", 0, 0);
    let mut cells = vec![c.clone()];
    cells.extend(neighbors(&c));
    cells
}

/// Gradient wrt inputs (store fixed) and wrt parameters (inputs fixed).
fn both<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let e_in = grad_check(inputs, EPS, |g, v| f(g, store, v))?;
    let e_par = grad_check_params(store, EPS, |g, s| {
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        f(g, s, &vars)
    })?;
    Ok(e_in.max(e_par.max_rel_err))
}

/// Runs every case; `with_model` adds an end-to-end check through the
/// assembled model on a tiny synthetic grid.
pub fn gradient_suite(seed: u64, with_model: bool) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(String, f64)> = Vec::new();

    let (a, b) = (random(&mut rng, &[3, 4], 1.0), random(&mut rng, &[4, 2], 1.0));
    cases.push(("matmul".into(), grad_check(&[a, b], EPS, |g, v| {
        let m = g.matmul(v[0], v[1])?;
        project(g, m, 1)
    })?));

    let logits = random(&mut rng, &[4, 4], 2.0);
    let mut bias = Tensor::<f64>::zeros(&[4, 4]);
    for &(i, j) in &[(0, 2), (1, 3), (3, 0), (3, 1)] {
        bias.data_mut()[i * 4 + j] = MASK_BIAS;
    }
    cases.push(("masked_softmax".into(), grad_check(&[logits], EPS, |g, v| {
        let s = g.masked_softmax(v[0], Some(&bias))?;
        project(g, s, 2)
    })?));

    let ln = [random(&mut rng, &[3, 5], 2.0), random(&mut rng, &[5], 1.0), random(&mut rng, &[5], 1.0)];
    cases.push(("layernorm".into(), grad_check(&ln, EPS, |g, v| {
        let y = g.layernorm(v[0], v[1], v[2])?;
        project(g, y, 3)
    })?));

    let enc = EncoderConfig { d: 4, t_tokens: 2, p_tokens: 4, tile_px: 4, n_layers: 1, n_heads: 2, time_embedding: true };
    let mut store = ParamStore::new();
    init_numeric_encoder(&mut store, &mut rng, &enc, 5);
    let x = random(&mut rng, &[2, 1, 5], 1.0);
    cases.push(("numeric_encoder".into(), both(&store, &[x], |g, s, v| {
        let z = numeric_tokens(g, s, &enc, v[0], &[0, 3600])?;
        project(g, z, 4)
    })?));

    let mut store = ParamStore::new();
    init_visual_encoder(&mut store, &mut rng, &enc)?;
    let patches = random(&mut rng, &[1, 4, 4], 1.0);
    cases.push(("visual_encoder".into(), both(&store, &[patches], |g, s, v| {
        let z = visual_tokens(g, s, &enc, v[0])?;
        project(g, z, 5)
    })?));

    let mut store = ParamStore::new();
    init_cross_attn(&mut store, &mut rng, "x", 4, 3);
    let (q, kv) = (random(&mut rng, &[3, 4], 1.0), random(&mut rng, &[5, 4], 1.0));
    cases.push(("cross_attend".into(), both(&store, &[q, kv], |g, s, v| {
        let (o, _) = cross_attend_graph(g, s, "x", v[0], v[1])?;
        project(g, o, 6)
    })?));

    let fcfg = FusionConfig { dh: 3, layers: 2 };
    let mut store = ParamStore::new();
    init_fusion(&mut store, &mut rng, 4, &fcfg);
    let (xn, xv) = (random(&mut rng, &[2, 6, 4], 1.0), random(&mut rng, &[2, 4, 4], 1.0));
    cases.push(("fuse".into(), both(&store, &[xn, xv], |g, s, v| {
        let (pn, pv) = fuse_graph(g, s, &fcfg, v[0], v[1])?;
        let c = g.concat_cols(&[pn, pv])?;
        project(g, c, 7)
    })?));

    let topo = build_topology(flower())?;
    let adj = adjacency_bias::<f64>(&topo, 0..topo.len());
    let mut store = ParamStore::new();
    init_gat(&mut store, &mut rng, 3);
    let xg = random(&mut rng, &[7, 6], 1.0);
    cases.push(("gat_forward".into(), both(&store, &[xg.clone()], |g, s, v| {
        let (z, _) = gat_graph(g, s, v[0], &adj, 0.2)?;
        project(g, z, 8)
    })?));

    let scfg = SpatialConfig { leaky_slope: 0.2, globals: 2, blocks: 2 };
    let mask = build_mask(&topo, scfg.globals);
    let mut store = ParamStore::new();
    init_sparse(&mut store, &mut rng, 3, &scfg);
    // non-zero globals so their gradient path is exercised
    store.set_value("sparse.global", random(&mut rng, &[2, 3], 0.5))?;
    let zs = random(&mut rng, &[7, 3], 1.0);
    cases.push(("sparse_attention".into(), both(&store, &[zs], |g, s, v| {
        let y = sparse_attention_graph(g, s, &scfg, v[0], &mask)?;
        project(g, y, 9)
    })?));

    let mut store = ParamStore::new();
    init_gat(&mut store, &mut rng, 3);
    init_sparse(&mut store, &mut rng, 3, &scfg);
    store.set_value("sparse.global", random(&mut rng, &[2, 3], 0.5))?;
    cases.push(("gat_then_sparse".into(), both(&store, &[xg], |g, s, v| {
        let (z, _) = gat_graph(g, s, v[0], &adj, 0.2)?;
        let y = sparse_attention_graph(g, s, &scfg, z, &mask)?;
        project(g, y, 10)
    })?));

    let hcfg = HeadConfig { hidden: 5, dropout: 0.2 };
    let mut store = ParamStore::new();
    init_head(&mut store, &mut rng, 4, &hcfg);
    let zh = random(&mut rng, &[6, 4], 1.0);
    cases.push(("mlp_head".into(), both(&store, &[zh], |g, s, v| {
        g.set_dropout(Some(DropoutKey { seed: 3, call: 1 }));
        let p = head_graph(g, s, &hcfg, v[0])?;
        project(g, p, 11)
    })?));

    let p: Vec<f64> = (0..8).map(|_| rng.random_range(0.05..0.95)).collect();
    let y = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    cases.push(("weighted_bce".into(), grad_check(&[Tensor::from_f64(&[8, 1], &p)?], EPS, |g, v| {
        g.weighted_bce(v[0], &y, 0.6, 2.5)
    })?));

    let mut store = ParamStore::new();
    init_encoder_block(&mut store, &mut rng, "blk", 4);
    init_linear(&mut store, &mut rng, "lin", 4, 2, true);
    let xb = random(&mut rng, &[2, 3, 4], 1.0);
    cases.push(("encoder_block".into(), both(&store, &[xb], |g, s, v| {
        let y = encoder_block(g, s, "blk", v[0], 2)?;
        let y = linear(g, s, "lin", y)?;
        project(g, y, 12)
    })?));

    if with_model {
        cases.push(("full_model".into(), model_case(seed)?));
    }
    Ok(cases
        .into_iter()
        .map(|(name, e)| GradCase { passed: e < TOLERANCE, name, max_rel_err: e })
        .collect())
}

fn model_case(seed: u64) -> Result<f64> {
    let cfg = HarnessConfig {
        d: 4,
        t_tokens: 1,
        p_tokens: 4,
        tile_px: 4,
        n_layers: 1,
        n_heads: 1,
        dh: 3,
        fusion_layers: 1,
        globals: 1,
        sparse_blocks: 1,
        head_hidden: 3,
        ..HarnessConfig::default()
    };
    let spec = SynthSpec { cols: 2, rows: 2, hours: 40, tile_px: 4, missing_rate: 0.0, seed, ..SynthSpec::default() };
    let data = generate_synth(&spec)?;
    let prep = Prepared::new(&data.dataset(5)?, &data.tiles, &cfg)?;
    let mut store = init_params(&cfg, prep.in_dim, seed)?;
    store.set_value("sparse.global", Tensor::filled(&[1, 4], 0.3))?;
    let y: Vec<f64> = prep.target_labels(&[10, 11]).into_iter().map(f64::from).collect();
    let rep = grad_check_params(&store, EPS, |g, s| {
        let model = Model { variant: Variant::PlusSparseGlobal, cfg: cfg.clone(), store: s.clone(), thresholds: None };
        g.set_dropout(Some(DropoutKey { seed: 1, call: 0 }));
        let (p, _) = forward(g, &model, &prep, &[10, 11], &WindowRule::Fixed(3))?;
        g.weighted_bce(p, &y, 0.6, 3.0)
    })?;
    Ok(rep.max_rel_err)
}
