//! Bidirectional single-head cross-modal attention and mean-pooling into one
//! embedding per modality.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::nn::{init_layernorm, layer_norm, scaled_attention, xavier};
use crate::diffcore::{Graph, ParamStore, Tensor, Var};
use crate::encoders::TokenSeq;
use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;

/// Hidden width used by the full-scale model.
pub const FULL_SCALE_DH: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub dh: usize,
    pub layers: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { dh: 32, layers: 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedEmbedding<T> {
    pub x_num: Tensor<T>,
    pub x_vis: Tensor<T>,
}

/// Parameter prefix of the attention in which `queries` attend to the other modality.
pub fn layer_prefix(layer: usize, numeric_queries: bool) -> String {
    format!("fuse.l{layer}.{}", if numeric_queries { "nq" } else { "vq" })
}

/// `wq, wk, wv: [d, dh]`, `wo: [dh, d]` and a LayerNorm over `d`.
pub fn init_cross_attn<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, prefix: &str, d: usize, dh: usize) {
    for p in ["wq", "wk", "wv"] {
        store.insert(&format!("{prefix}.{p}"), xavier(rng, d, dh, &[d, dh]));
    }
    store.insert(&format!("{prefix}.wo"), xavier(rng, dh, d, &[dh, d]));
    init_layernorm(store, &format!("{prefix}.ln"), d);
}

pub fn init_fusion<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, d: usize, cfg: &FusionConfig) {
    for l in 0..cfg.layers {
        init_cross_attn(store, rng, &layer_prefix(l, true), d, cfg.dh);
        init_cross_attn(store, rng, &layer_prefix(l, false), d, cfg.dh);
    }
}

/// `LN(q + softmax(q Wq (kv Wk)ᵀ / √dh) (kv Wv) Wo)`; also returns the weights.
///
/// Works on `[B, n, d]` batches; a batch-1 side broadcasts.
pub fn cross_attend_graph<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    q: Var,
    kv: Var,
) -> Result<(Var, Var)> {
    if g.value(q).cols() != g.value(kv).cols() {
        return Err(shape_err!("query width {} vs key width {}", g.value(q).cols(), g.value(kv).cols()));
    }
    let wq = g.param(store, &format!("{prefix}.wq"))?;
    let wk = g.param(store, &format!("{prefix}.wk"))?;
    let wv = g.param(store, &format!("{prefix}.wv"))?;
    let wo = g.param(store, &format!("{prefix}.wo"))?;
    let qq = g.matmul(q, wq)?;
    let kk = g.matmul(kv, wk)?;
    let vv = g.matmul(kv, wv)?;
    let (att, w) = scaled_attention(g, qq, kk, vv, None)?;
    let o = g.matmul(att, wo)?;
    let r = g.add(q, o)?;
    Ok((layer_norm(g, store, &format!("{prefix}.ln"), r)?, w))
}

/// Runs the fusion stack and mean-pools each modality: `([B,1,d], [B,1,d])`.
pub fn fuse_graph<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &FusionConfig,
    x_num: Var,
    x_vis: Var,
) -> Result<(Var, Var)> {
    let (mut n, mut v) = (x_num, x_vis);
    for l in 0..cfg.layers {
        n = cross_attend_graph(g, store, &layer_prefix(l, true), n, v)?.0;
        v = cross_attend_graph(g, store, &layer_prefix(l, false), v, n)?.0;
    }
    Ok((g.mean_rows(n)?, g.mean_rows(v)?))
}

pub fn cross_attend<T: Scalar>(
    queries: &TokenSeq<T>,
    keys_values: &TokenSeq<T>,
    store: &ParamStore<T>,
    prefix: &str,
) -> Result<Tensor<T>> {
    if keys_values.is_empty() {
        return Err(invalid!("empty key sequence"));
    }
    let mut g = Graph::new();
    let q = g.constant(queries.tokens.clone());
    let kv = g.constant(keys_values.tokens.clone());
    let (out, _) = cross_attend_graph(&mut g, store, prefix, q, kv)?;
    Ok(g.value(out).clone())
}

/// Fuses `w` hours of numeric and visual tokens into `(x̃_num, x̃_vis)`.
pub fn fuse<T: Scalar>(
    x_num: &TokenSeq<T>,
    x_vis: &TokenSeq<T>,
    store: &ParamStore<T>,
    cfg: &FusionConfig,
) -> Result<FusedEmbedding<T>> {
    if x_num.hours_covered != x_vis.hours_covered {
        return Err(invalid!("numeric covers {} hours, visual {}", x_num.hours_covered, x_vis.hours_covered));
    }
    let mut g = Graph::new();
    let n = g.constant(x_num.tokens.clone());
    let v = g.constant(x_vis.tokens.clone());
    let (pn, pv) = fuse_graph(&mut g, store, cfg, n, v)?;
    let d = x_num.width();
    Ok(FusedEmbedding {
        x_num: g.value(pn).clone().reshape(&[d])?,
        x_vis: g.value(pv).clone().reshape(&[d])?,
    })
}
