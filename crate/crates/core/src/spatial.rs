//! Local graph attention over the hex grid and masked global attention with
//! learnable global tokens.

use std::fmt::Write as _;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::nn::{init_layernorm, layer_norm, scaled_attention, xavier};
use crate::diffcore::{Graph, ParamStore, Tensor, Var, MASK_BIAS};
use crate::error::{invalid, shape_err, Result};
use crate::fusion::FusedEmbedding;
use crate::hexgrid::{CellIndex, GridTopology};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialConfig {
    pub leaky_slope: f64,
    /// Number of global tokens.
    pub globals: usize,
    /// Sparse attention blocks; global states carry over between blocks.
    pub blocks: usize,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self { leaky_slope: 0.2, globals: 2, blocks: 2 }
    }
}

/// Node embeddings stacked in topology order.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeMatrix<T> {
    pub z: Tensor<T>,
    pub cells: Vec<CellIndex>,
}

/// `gat.w: [2d, d]`, `gat.a: [2d]`.
pub fn init_gat<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, d: usize) {
    store.insert("gat.w", xavier(rng, 2 * d, d, &[2 * d, d]));
    store.insert("gat.a", xavier(rng, 2 * d, 1, &[2 * d]));
}

/// Per-block `wq, wk, wv, wo: [d, d]` plus LayerNorm, and zero-initialised
/// `sparse.global: [G, d]`.
pub fn init_sparse<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, d: usize, cfg: &SpatialConfig) {
    for b in 0..cfg.blocks {
        for p in ["wq", "wk", "wv", "wo"] {
            store.insert(&format!("sparse.b{b}.{p}"), xavier(rng, d, d, &[d, d]));
        }
        init_layernorm(store, &format!("sparse.b{b}.ln"), d);
    }
    if cfg.globals > 0 {
        store.insert("sparse.global", Tensor::zeros(&[cfg.globals, d]));
    }
}

/// Additive bias over `nodes` allowing each node itself and its neighbours.
pub fn adjacency_bias<T: Scalar>(topo: &GridTopology, nodes: Range<usize>) -> Tensor<T> {
    let n = nodes.len();
    let mut b = vec![T::lit(MASK_BIAS); n * n];
    for i in 0..n {
        b[i * n + i] = T::zero();
        for &j in topo.neighbor_indices(nodes.start + i) {
            if nodes.contains(&j) {
                b[i * n + (j - nodes.start)] = T::zero();
            }
        }
    }
    Tensor::new(vec![n, n], b).expect("square")
}

/// `x: [B, n, 2d]` → `[B, n, d]`; `bias` is the `[n, n]` neighbourhood mask.
/// Also returns the attention coefficients `[B, n, n]`.
pub fn gat_graph<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    bias: &Tensor<T>,
    leaky_slope: f64,
) -> Result<(Var, Var)> {
    let w = g.param(store, "gat.w")?;
    let d = g.value(w).cols();
    if g.value(x).cols() != 2 * d {
        return Err(shape_err!("GAT input width {} but W_g expects {}", g.value(x).cols(), 2 * d));
    }
    let a = g.param(store, "gat.a")?;
    let a = g.reshape(a, &[2 * d, 1])?;
    let a_self = g.slice_rows(a, 0, d)?;
    let a_nb = g.slice_rows(a, d, d)?;
    let h = g.matmul(x, w)?;
    let s_self = g.matmul(h, a_self)?;
    let s_nb = g.matmul(h, a_nb)?;
    let s_nb = g.transpose(s_nb)?;
    let e = g.add(s_self, s_nb)?;
    let e = g.leaky_relu(e, T::lit(leaky_slope));
    let alpha = g.masked_softmax(e, Some(bias))?;
    let agg = g.matmul(alpha, h)?;
    Ok((g.relu(agg), alpha))
}

pub fn gat_forward<T: Scalar>(
    fused: &[FusedEmbedding<T>],
    topo: &GridTopology,
    store: &ParamStore<T>,
    cfg: &SpatialConfig,
) -> Result<NodeMatrix<T>> {
    if fused.len() != topo.len() {
        return Err(shape_err!("{} embeddings for {} nodes", fused.len(), topo.len()));
    }
    let mut rows = Vec::new();
    for f in fused {
        rows.extend_from_slice(f.x_num.data());
        rows.extend_from_slice(f.x_vis.data());
    }
    let width = rows.len() / fused.len();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![fused.len(), width], rows)?);
    let (z, _) = gat_graph(&mut g, store, x, &adjacency_bias(topo, 0..topo.len()), cfg.leaky_slope)?;
    Ok(NodeMatrix { z: g.value(z).clone(), cells: topo.cells().to_vec() })
}

/// Allow-matrix over `N` nodes followed by `G` global tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseMask {
    pub nodes: usize,
    pub globals: usize,
    allow: Vec<bool>,
}

impl SparseMask {
    pub fn size(&self) -> usize {
        self.nodes + self.globals
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.size() + j]
    }

    pub fn bias<T: Scalar>(&self) -> Tensor<T> {
        let n = self.size();
        let data = self.allow.iter().map(|&a| if a { T::zero() } else { T::lit(MASK_BIAS) }).collect();
        Tensor::new(vec![n, n], data).expect("square")
    }

    /// Row-major `0`/`1` text, one row per line.
    pub fn to_text(&self) -> String {
        let n = self.size();
        let mut s = String::with_capacity(n * (2 * n));
        for i in 0..n {
            for j in 0..n {
                if j > 0 {
                    s.push(' ');
                }
                let _ = write!(s, "{}", u8::from(self.allowed(i, j)));
            }
            s.push('\n');
        }
        s
    }
}

/// Mask for the nodes in `range` of `topo` (one region) plus `globals` tokens.
pub fn build_mask_range(topo: &GridTopology, range: Range<usize>, globals: usize) -> SparseMask {
    let n = range.len();
    let size = n + globals;
    let mut allow = vec![false; size * size];
    for i in 0..size {
        for j in 0..size {
            allow[i * size + j] = i == j || i >= n || j >= n;
        }
    }
    for i in 0..n {
        for &j in topo.neighbor_indices(range.start + i) {
            if range.contains(&j) {
                allow[i * size + (j - range.start)] = true;
            }
        }
    }
    SparseMask { nodes: n, globals, allow }
}

pub fn build_mask(topo: &GridTopology, globals: usize) -> SparseMask {
    build_mask_range(topo, 0..topo.len(), globals)
}

/// One masked single-head attention block with residual and LayerNorm.
pub fn sparse_block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    bias: &Tensor<T>,
) -> Result<Var> {
    let wq = g.param(store, &format!("{prefix}.wq"))?;
    let wk = g.param(store, &format!("{prefix}.wk"))?;
    let wv = g.param(store, &format!("{prefix}.wv"))?;
    let wo = g.param(store, &format!("{prefix}.wo"))?;
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let (att, _) = scaled_attention(g, q, k, v, Some(bias))?;
    let o = g.matmul(att, wo)?;
    let r = g.add(x, o)?;
    layer_norm(g, store, &format!("{prefix}.ln"), r)
}

/// `z: [B, N, d]` → `[B, N, d]`. Global tokens are appended after the nodes,
/// updated alongside them through every block, and dropped at the end.
pub fn sparse_attention_graph<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &SpatialConfig,
    z: Var,
    mask: &SparseMask,
) -> Result<Var> {
    let n = g.value(z).rows();
    if mask.nodes != n || mask.globals != cfg.globals {
        return Err(shape_err!("mask {}+{} vs {} nodes and {} globals", mask.nodes, mask.globals, n, cfg.globals));
    }
    if cfg.blocks == 0 {
        return Err(invalid!("sparse attention needs at least one block"));
    }
    let bias = mask.bias::<T>();
    let mut x = if cfg.globals > 0 {
        let gl = g.param(store, "sparse.global")?;
        g.concat_rows(&[z, gl])?
    } else {
        z
    };
    for b in 0..cfg.blocks {
        x = sparse_block(g, store, &format!("sparse.b{b}"), x, &bias)?;
    }
    if cfg.globals > 0 {
        x = g.slice_rows(x, 0, n)?;
    }
    Ok(x)
}

pub fn sparse_attention<T: Scalar>(
    z: &NodeMatrix<T>,
    mask: &SparseMask,
    store: &ParamStore<T>,
    cfg: &SpatialConfig,
) -> Result<NodeMatrix<T>> {
    let mut g = Graph::new();
    let x = g.constant(z.z.clone());
    let y = sparse_attention_graph(&mut g, store, cfg, x, mask)?;
    Ok(NodeMatrix { z: g.value(y).clone(), cells: z.cells.clone() })
}
