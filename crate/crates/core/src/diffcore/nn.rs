//! Parameter initialisation and the shared attention building blocks.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// Glorot-uniform tensor of the given shape.
pub fn xavier<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-a..a))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// `name.w: [fan_in, fan_out]` and, when `bias`, a zero `name.b: [fan_out]`.
pub fn init_linear<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) {
    store.insert(&format!("{name}.w"), xavier(rng, fan_in, fan_out, &[fan_in, fan_out]));
    if bias {
        store.insert(&format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }
}

pub fn init_layernorm<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) {
    store.insert(&format!("{name}.g"), Tensor::filled(&[d], T::one()));
    store.insert(&format!("{name}.b"), Tensor::zeros(&[d]));
}

/// `x · name.w (+ name.b)`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let y = g.matmul(x, w)?;
    let bname = format!("{name}.b");
    if store.contains(&bname) {
        let b = g.param(store, &bname)?;
        return g.add(y, b);
    }
    Ok(y)
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let gain = g.param(store, &format!("{name}.g"))?;
    let bias = g.param(store, &format!("{name}.b"))?;
    g.layernorm(x, gain, bias)
}

/// `softmax(q kᵀ / √d_k + bias) v`; returns `(output, weights)`.
pub fn scaled_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<&Tensor<T>>,
) -> Result<(Var, Var)> {
    let dk = g.value(q).cols();
    if g.value(k).rows() == 0 {
        return Err(invalid!("attention over an empty key set"));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::one() / T::from_usize(dk).unwrap().sqrt());
    let w = g.masked_softmax(scores, bias)?;
    let out = g.matmul(w, v)?;
    Ok((out, w))
}

/// Projections `wq, wk, wv: [d, d]`, `wo: [d, d]` (no biases).
pub fn init_self_attention<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, prefix: &str, d: usize) {
    for p in ["wq", "wk", "wv", "wo"] {
        store.insert(&format!("{prefix}.{p}"), xavier(rng, d, d, &[d, d]));
    }
}

/// Multi-head self-attention (before residual); heads split the width evenly.
pub fn self_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    heads: usize,
    bias: Option<&Tensor<T>>,
) -> Result<Var> {
    let d = g.value(x).cols();
    if heads == 0 || d % heads != 0 {
        return Err(invalid!("width {d} not divisible into {heads} heads"));
    }
    let wq = g.param(store, &format!("{prefix}.wq"))?;
    let wk = g.param(store, &format!("{prefix}.wk"))?;
    let wv = g.param(store, &format!("{prefix}.wv"))?;
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, h * dh, dh)?, g.slice_cols(k, h * dh, dh)?, g.slice_cols(v, h * dh, dh)?)
        };
        outs.push(scaled_attention(g, qh, kh, vh, bias)?.0);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let wo = g.param(store, &format!("{prefix}.wo"))?;
    g.matmul(cat, wo)
}

/// Post-norm transformer block: attention and a `d → 2d → d` ReLU MLP, each
/// with residual and LayerNorm.
pub fn init_encoder_block<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, prefix: &str, d: usize) {
    init_self_attention(store, rng, &format!("{prefix}.attn"), d);
    init_layernorm(store, &format!("{prefix}.ln1"), d);
    init_linear(store, rng, &format!("{prefix}.ff1"), d, 2 * d, true);
    init_linear(store, rng, &format!("{prefix}.ff2"), 2 * d, d, true);
    init_layernorm(store, &format!("{prefix}.ln2"), d);
}

pub fn encoder_block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let a = self_attention(g, store, &format!("{prefix}.attn"), x, heads, None)?;
    let r = g.add(x, a)?;
    let x1 = layer_norm(g, store, &format!("{prefix}.ln1"), r)?;
    let h = linear(g, store, &format!("{prefix}.ff1"), x1)?;
    let h = g.relu(h);
    let h = linear(g, store, &format!("{prefix}.ff2"), h)?;
    let r = g.add(x1, h)?;
    layer_norm(g, store, &format!("{prefix}.ln2"), r)
}
