use std::collections::BTreeMap;

use rand::Rng;

use super::params::ParamStore;
use super::rng::counter_stream;
use super::tensor::{gemm, Tensor};
use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;

/// Additive bias marking a disallowed attention entry.
pub const MASK_BIAS: f64 = -1e30;
/// Bias values at or below this are treated as masked.
const MASKED_BELOW: f64 = -1e29;
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Dropout(Var, Vec<T>),
    MeanRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherBatch(Var, Vec<usize>),
    ConcatBatch(Vec<Var>),
    Reshape(Var),
    WeightedBce { p: Var, y: Vec<T>, w0: T, w1: T },
    SumAll(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Dropout randomness for one forward pass: `(seed, call)` plus a per-site id
/// key a counter-based stream, so masks do not depend on evaluation order.
#[derive(Clone, Copy, Debug)]
pub struct DropoutKey {
    pub seed: u64,
    pub call: u64,
}

/// Reverse-mode tape over dense tensors.
///
/// Every operation appends a node holding its forward value; [`Graph::backward`]
/// walks the tape in reverse and returns gradients for every node that
/// (transitively) depends on a gradient-requiring leaf.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    dropout: Option<DropoutKey>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn bcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

fn strides(d: (usize, usize, usize), out: (usize, usize, usize)) -> (usize, usize, usize) {
    let (b, m, n) = d;
    (
        if b == 1 && out.0 > 1 { 0 } else { m * n },
        if m == 1 && out.1 > 1 { 0 } else { n },
        if n == 1 && out.2 > 1 { 0 } else { 1 },
    )
}

fn shape_from3(d: (usize, usize, usize), rank: usize) -> Vec<usize> {
    match rank {
        1 if d.0 == 1 && d.1 == 1 => vec![d.2],
        1 | 2 if d.0 == 1 => vec![d.1, d.2],
        _ => vec![d.0, d.1, d.2],
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new(), dropout: None }
    }

    /// Enables stochastic dropout for subsequent [`Graph::dropout`] calls.
    pub fn with_dropout(mut self, key: DropoutKey) -> Self {
        self.dropout = Some(key);
        self
    }

    pub fn set_dropout(&mut self, key: Option<DropoutKey>) {
        self.dropout = key;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize, usize) {
        self.nodes[v.0].value.dims3()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds a named parameter; frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store.get(name).ok_or_else(|| invalid!("unknown parameter `{name}`"))?;
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, m, k) = self.dims(a);
        let (bb, k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err!("matmul inner dims {:?} x {:?}", self.shape(a), self.shape(b)));
        }
        let batch = bcast_dim(ba, bb)
            .ok_or_else(|| shape_err!("matmul batch {:?} x {:?}", self.shape(a), self.shape(b)))?;
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            let ao = if ba == 1 { 0 } else { i * m * k };
            let bo = if bb == 1 { 0 } else { i * k * n };
            gemm(&av[ao..ao + m * k], &bv[bo..bo + k * n], &mut out[i * m * n..(i + 1) * m * n], m, k, n, false, false);
        }
        let rank = self.shape(a).len().max(self.shape(b).len()).max(2);
        let t = Tensor::new(shape_from3((batch, m, n), rank), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (b, m, n) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); b * m * n];
        for k in 0..b {
            for i in 0..m {
                for j in 0..n {
                    out[k * m * n + j * m + i] = src[k * m * n + i * n + j];
                }
            }
        }
        let rank = self.shape(a).len().max(2);
        let t = Tensor::new(shape_from3((b, n, m), rank), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (da, db) = (self.dims(a), self.dims(b));
        let out = match (bcast_dim(da.0, db.0), bcast_dim(da.1, db.1), bcast_dim(da.2, db.2)) {
            (Some(x), Some(y), Some(z)) => (x, y, z),
            _ => return Err(shape_err!("cannot broadcast {:?} with {:?}", self.shape(a), self.shape(b))),
        };
        let (sa, sb) = (strides(da, out), strides(db, out));
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(out.0 * out.1 * out.2);
        for i in 0..out.0 {
            for j in 0..out.1 {
                for k in 0..out.2 {
                    data.push(f(av[i * sa.0 + j * sa.1 + k * sa.2], bv[i * sb.0 + j * sb.1 + k * sb.2]));
                }
            }
        }
        let rank = self.shape(a).len().max(self.shape(b).len());
        Tensor::new(shape_from3(out, rank), data)
    }

    /// Elementwise sum with broadcasting over any size-1 axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary(a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.broadcast_binary(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let t = self.value(a).map(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.rg(a);
        self.push(t, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// Row-wise softmax of `logits + bias` over the last axis.
    ///
    /// `bias` is a constant broadcast over the batch; entries at [`MASK_BIAS`]
    /// come out exactly zero. A row whose every entry is masked is rejected.
    pub fn masked_softmax(&mut self, logits: Var, bias: Option<&Tensor<T>>) -> Result<Var> {
        let (b, m, n) = self.dims(logits);
        let lv = self.value(logits).data();
        let masked = T::lit(MASKED_BELOW);
        let bias_at = |k: usize, i: usize, j: usize| -> T {
            match bias {
                None => T::zero(),
                Some(t) => {
                    let (bb, bm, bn) = t.dims3();
                    let kk = if bb == 1 { 0 } else { k };
                    let ii = if bm == 1 { 0 } else { i };
                    let jj = if bn == 1 { 0 } else { j };
                    t.data()[(kk * bm + ii) * bn + jj]
                }
            }
        };
        if let Some(t) = bias {
            let (bb, bm, bn) = t.dims3();
            if bcast_dim(bb, b).is_none() || bcast_dim(bm, m) != Some(m) || bcast_dim(bn, n) != Some(n) {
                return Err(shape_err!("mask {:?} does not fit logits {:?}", t.shape(), self.shape(logits)));
            }
        }
        let mut out = vec![T::zero(); b * m * n];
        let mut row = vec![T::zero(); n];
        for k in 0..b {
            for i in 0..m {
                let mut any = false;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    let bias_v = bias_at(k, i, j);
                    if bias_v > masked {
                        any = true;
                    }
                    row[j] = lv[(k * m + i) * n + j] + bias_v;
                    mx = mx.max(row[j]);
                }
                if !any {
                    return Err(invalid!("attention row {i} (batch {k}) is fully masked"));
                }
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                for j in 0..n {
                    out[(k * m + i) * n + j] = row[j] / s;
                }
            }
        }
        let t = Tensor::new(self.shape(logits).to_vec(), out)?;
        let rg = self.rg(logits);
        Ok(self.push(t, Op::Softmax(logits), rg))
    }

    /// Per-row normalisation to zero mean / unit variance, then `gain·x̂ + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (b, m, d) = self.dims(x);
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err!("layernorm width {d} vs gain/bias {:?}/{:?}", self.shape(gain), self.shape(bias)));
        }
        let eps = T::lit(LAYERNORM_EPS);
        let dn = T::from_usize(d).unwrap();
        let xv = self.value(x).data();
        let (g, bb) = (self.value(gain).data(), self.value(bias).data());
        let rows = b * m;
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let xs = &xv[r * d..(r + 1) * d];
            let mean = xs.iter().copied().sum::<T>() / dn;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (xs[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + bb[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Inverted dropout. Identity unless a [`DropoutKey`] is set and `p > 0`.
    pub fn dropout(&mut self, x: Var, p: f64, site: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid!("dropout rate {p} outside [0, 1)"));
        }
        let Some(key) = self.dropout else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let mask: Vec<T> = dropout_mask(key, site, self.value(x).len(), p);
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Dropout(x, mask), rg))
    }

    /// Mean over the row axis: `[b, m, n] -> [b, 1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (b, m, n) = self.dims(a);
        let src = self.value(a).data();
        let inv = T::one() / T::from_usize(m).unwrap();
        let mut out = vec![T::zero(); b * n];
        for k in 0..b {
            for i in 0..m {
                for j in 0..n {
                    out[k * n + j] += src[(k * m + i) * n + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let rank = self.shape(a).len().max(2);
        let t = Tensor::new(shape_from3((b, 1, n), rank), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::MeanRows(a), rg))
    }

    fn concat_batch_dim(&self, parts: &[Var]) -> Result<usize> {
        let mut batch = 1;
        for &p in parts {
            batch = bcast_dim(batch, self.dims(p).0).ok_or_else(|| shape_err!("concat batch mismatch"))?;
        }
        Ok(batch)
    }

    /// Concatenates along the column axis; batch-1 parts broadcast.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims(parts[0]).1;
        if parts.iter().any(|&p| self.dims(p).1 != m) {
            return Err(shape_err!("concat_cols row mismatch"));
        }
        let batch = self.concat_batch_dim(parts)?;
        let total: usize = parts.iter().map(|&p| self.dims(p).2).sum();
        let mut out = Vec::with_capacity(batch * m * total);
        for k in 0..batch {
            for i in 0..m {
                for &p in parts {
                    let (pb, _, pn) = self.dims(p);
                    let kk = if pb == 1 { 0 } else { k };
                    let off = (kk * m + i) * pn;
                    out.extend_from_slice(&self.value(p).data()[off..off + pn]);
                }
            }
        }
        let rank = parts.iter().map(|&p| self.shape(p).len()).max().unwrap().max(2);
        let t = Tensor::new(shape_from3((batch, m, total), rank), out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Concatenates along the row axis; batch-1 parts broadcast.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims(parts[0]).2;
        if parts.iter().any(|&p| self.dims(p).2 != n) {
            return Err(shape_err!("concat_rows column mismatch"));
        }
        let batch = self.concat_batch_dim(parts)?;
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(batch * total * n);
        for k in 0..batch {
            for &p in parts {
                let (pb, pm, _) = self.dims(p);
                let kk = if pb == 1 { 0 } else { k };
                out.extend_from_slice(&self.value(p).data()[kk * pm * n..(kk + 1) * pm * n]);
            }
        }
        let rank = parts.iter().map(|&p| self.shape(p).len()).max().unwrap().max(2);
        let t = Tensor::new(shape_from3((batch, total, n), rank), out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (b, m, n) = self.dims(a);
        if len == 0 || start + len > m {
            return Err(shape_err!("slice_rows {start}+{len} out of {m}"));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(b * len * n);
        for k in 0..b {
            out.extend_from_slice(&src[(k * m + start) * n..(k * m + start + len) * n]);
        }
        let rank = self.shape(a).len().max(2);
        let t = Tensor::new(shape_from3((b, len, n), rank), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (b, m, n) = self.dims(a);
        if len == 0 || start + len > n {
            return Err(shape_err!("slice_cols {start}+{len} out of {n}"));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(b * m * len);
        for r in 0..b * m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let t = Tensor::new(shape_from3((b, m, len), self.shape(a).len().max(2)), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SliceCols(a, start), rg))
    }

    /// Selects batch entries: `out[i] = a[idx[i]]`.
    pub fn gather_batch(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (b, m, n) = self.dims(a);
        if idx.is_empty() || idx.iter().any(|&i| i >= b) {
            return Err(shape_err!("gather index out of batch {b}"));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * m * n);
        for &i in idx {
            out.extend_from_slice(&src[i * m * n..(i + 1) * m * n]);
        }
        let t = Tensor::new(vec![idx.len(), m, n], out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::GatherBatch(a, idx.to_vec()), rg))
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, m, n) = self.dims(parts[0]);
        if parts.iter().any(|&p| { let d = self.dims(p); d.1 != m || d.2 != n }) {
            return Err(shape_err!("concat_batch matrix shape mismatch"));
        }
        let mut out = Vec::new();
        let mut b = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
            b += self.dims(p).0;
        }
        let t = Tensor::new(vec![b, m, n], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatBatch(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Mean class-weighted binary cross-entropy over all entries of `p`.
    ///
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]`; the clamp has zero slope.
    pub fn weighted_bce(&mut self, p: Var, y: &[T], w0: T, w1: T) -> Result<Var> {
        let pv = self.value(p).data();
        if pv.len() != y.len() {
            return Err(shape_err!("bce: {} predictions vs {} labels", pv.len(), y.len()));
        }
        let n = T::from_usize(y.len()).unwrap();
        let loss = pv
            .iter()
            .zip(y)
            .map(|(&pp, &yy)| bce_term(pp, yy, w0, w1))
            .sum::<T>()
            / n;
        let rg = self.rg(p);
        Ok(self.push(Tensor::scalar(loss), Op::WeightedBce { p, y: y.to_vec(), w0, w1 }, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).len()).unwrap();
        let s = self.sum_all(a);
        self.scale(s, T::one() / n)
    }

    /// Reverse sweep from the scalar `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.value(out).len() != 1 {
            return Err(shape_err!("backward needs a scalar output, got {:?}", self.shape(out)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::filled(self.shape(out), T::one()));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backward_node(node, &gout, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(e) => e.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums `g` (laid out as `out`) down to the broadcast source shape of `v`.
    fn reduce_to(&self, v: Var, g: &Tensor<T>) -> Tensor<T> {
        let out = g.dims3();
        let d = self.dims(v);
        if d == out {
            return Tensor::new(self.shape(v).to_vec(), g.data().to_vec()).unwrap();
        }
        let s = strides(d, out);
        let mut acc = vec![T::zero(); d.0 * d.1 * d.2];
        let gd = g.data();
        let mut idx = 0;
        for i in 0..out.0 {
            for j in 0..out.1 {
                for k in 0..out.2 {
                    acc[i * s.0 + j * s.1 + k * s.2] += gd[idx];
                    idx += 1;
                }
            }
        }
        Tensor::new(self.shape(v).to_vec(), acc).unwrap()
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ba, m, k) = self.dims(*a);
                let (bb, _, n) = self.dims(*b);
                let batch = g.dims3().0;
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    let mut da = vec![T::zero(); ba * m * k];
                    for i in 0..batch {
                        let ao = if ba == 1 { 0 } else { i * m * k };
                        let bo = if bb == 1 { 0 } else { i * k * n };
                        gemm(&gd[i * m * n..(i + 1) * m * n], &bv[bo..bo + k * n], &mut da[ao..ao + m * k], m, n, k, false, true);
                    }
                    self.acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), da)?);
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let mut db = vec![T::zero(); bb * k * n];
                    for i in 0..batch {
                        let ao = if ba == 1 { 0 } else { i * m * k };
                        let bo = if bb == 1 { 0 } else { i * k * n };
                        gemm(&av[ao..ao + m * k], &gd[i * m * n..(i + 1) * m * n], &mut db[bo..bo + k * n], k, m, n, true, false);
                    }
                    self.acc(grads, *b, Tensor::new(self.shape(*b).to_vec(), db)?);
                }
            }
            Op::Transpose(a) => {
                let (b, m, n) = self.dims(*a);
                let mut out = vec![T::zero(); b * m * n];
                for k in 0..b {
                    for i in 0..m {
                        for j in 0..n {
                            out[k * m * n + i * n + j] = gd[k * m * n + j * m + i];
                        }
                    }
                }
                self.acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), out)?);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                if self.rg(*a) {
                    let ga = self.reduce_to(*a, g);
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = self.reduce_to(*b, g);
                    if matches!(node.op, Op::Sub(..)) {
                        gb = gb.scale(-T::one());
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let out = g.dims3();
                let (da, db) = (self.dims(*a), self.dims(*b));
                let (sa, sb) = (strides(da, out), strides(db, out));
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![T::zero(); av.len()];
                let mut gb = vec![T::zero(); bv.len()];
                let mut idx = 0;
                for i in 0..out.0 {
                    for j in 0..out.1 {
                        for k in 0..out.2 {
                            let ia = i * sa.0 + j * sa.1 + k * sa.2;
                            let ib = i * sb.0 + j * sb.1 + k * sb.2;
                            ga[ia] += gd[idx] * bv[ib];
                            gb[ib] += gd[idx] * av[ia];
                            idx += 1;
                        }
                    }
                }
                self.acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), ga)?);
                self.acc(grads, *b, Tensor::new(self.shape(*b).to_vec(), gb)?);
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.scale(*c)),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = x.iter().zip(gd).map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() }).collect();
                self.acc(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::LeakyRelu(a, s) => {
                let x = self.value(*a).data();
                let d = x.iter().zip(gd).map(|(&xv, &gv)| if xv > T::zero() { gv } else { gv * *s }).collect();
                self.acc(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = y.iter().zip(gd).map(|(&yv, &gv)| gv * yv * (T::one() - yv)).collect();
                self.acc(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                let y = node.value.data();
                let mut d = vec![T::zero(); y.len()];
                for r in 0..y.len() / n {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &gd[r * n..(r + 1) * n];
                    let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        d[r * n + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.acc(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = self.value(*gain).len();
                let rows = xhat.len() / d;
                let gv = self.value(*gain).data();
                let dn = T::from_usize(d).unwrap();
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += gd[r * d + j] * xhat[r * d + j];
                            db[j] += gd[r * d + j];
                        }
                    }
                    self.acc(grads, *gain, Tensor::new(self.shape(*gain).to_vec(), dg)?);
                    self.acc(grads, *bias, Tensor::new(self.shape(*bias).to_vec(), db)?);
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gd[r * d + j] * gv[j];
                            m1 += dh;
                            m2 += dh * xhat[r * d + j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let dh = gd[r * d + j] * gv[j];
                            dx[r * d + j] = inv_std[r] * (dh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    self.acc(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx)?);
                }
            }
            Op::Dropout(a, mask) => {
                let d = gd.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.acc(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::MeanRows(a) => {
                let (b, m, n) = self.dims(*a);
                let inv = T::one() / T::from_usize(m).unwrap();
                let mut d = vec![T::zero(); b * m * n];
                for k in 0..b {
                    for i in 0..m {
                        for j in 0..n {
                            d[(k * m + i) * n + j] = gd[k * n + j] * inv;
                        }
                    }
                }
                self.acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), d)?);
            }
            Op::ConcatCols(parts) => {
                let (batch, m, total) = g.dims3();
                let mut off = 0;
                for &p in parts {
                    let (pb, _, pn) = self.dims(p);
                    if self.rg(p) {
                        let mut d = vec![T::zero(); pb * m * pn];
                        for k in 0..batch {
                            let kk = if pb == 1 { 0 } else { k };
                            for i in 0..m {
                                for j in 0..pn {
                                    d[(kk * m + i) * pn + j] += gd[(k * m + i) * total + off + j];
                                }
                            }
                        }
                        self.acc(grads, p, Tensor::new(self.shape(p).to_vec(), d)?);
                    }
                    off += pn;
                }
            }
            Op::ConcatRows(parts) => {
                let (batch, total, n) = g.dims3();
                let mut off = 0;
                for &p in parts {
                    let (pb, pm, _) = self.dims(p);
                    if self.rg(p) {
                        let mut d = vec![T::zero(); pb * pm * n];
                        for k in 0..batch {
                            let kk = if pb == 1 { 0 } else { k };
                            for i in 0..pm * n {
                                d[kk * pm * n + i] += gd[(k * total + off) * n + i];
                            }
                        }
                        self.acc(grads, p, Tensor::new(self.shape(p).to_vec(), d)?);
                    }
                    off += pm;
                }
            }
            Op::SliceRows(a, start) => {
                let (b, m, n) = self.dims(*a);
                let len = g.dims3().1;
                let mut d = vec![T::zero(); b * m * n];
                for k in 0..b {
                    d[(k * m + start) * n..(k * m + start + len) * n]
                        .copy_from_slice(&gd[k * len * n..(k + 1) * len * n]);
                }
                self.acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), d)?);
            }
            Op::SliceCols(a, start) => {
                let (b, m, n) = self.dims(*a);
                let len = g.dims3().2;
                let mut d = vec![T::zero(); b * m * n];
                for r in 0..b * m {
                    d[r * n + start..r * n + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), d)?);
            }
            Op::GatherBatch(a, idx) => {
                let (b, m, n) = self.dims(*a);
                let mut d = vec![T::zero(); b * m * n];
                for (o, &i) in idx.iter().enumerate() {
                    for e in 0..m * n {
                        d[i * m * n + e] += gd[o * m * n + e];
                    }
                }
                self.acc(grads, *a, Tensor::new(self.shape(*a).to_vec(), d)?);
            }
            Op::ConcatBatch(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        let t = Tensor::new(self.shape(p).to_vec(), gd[off..off + len].to_vec())?;
                        self.acc(grads, p, t);
                    }
                    off += len;
                }
            }
            Op::Reshape(a) => {
                let t = Tensor::new(self.shape(*a).to_vec(), gd.to_vec())?;
                self.acc(grads, *a, t);
            }
            Op::WeightedBce { p, y, w0, w1 } => {
                let pv = self.value(*p).data();
                let n = T::from_usize(y.len()).unwrap();
                let d = pv
                    .iter()
                    .zip(y)
                    .map(|(&pp, &yy)| gd[0] * bce_grad(pp, yy, *w0, *w1) / n)
                    .collect();
                self.acc(grads, *p, Tensor::new(self.shape(*p).to_vec(), d)?);
            }
            Op::SumAll(a) => {
                let t = Tensor::filled(self.shape(*a), gd[0]);
                self.acc(grads, *a, t);
            }
        }
        Ok(())
    }
}

const BCE_CLAMP: f64 = 1e-7;

fn bce_term<T: Scalar>(p: T, y: T, w0: T, w1: T) -> T {
    let lo = T::lit(BCE_CLAMP);
    let pc = p.max(lo).min(T::one() - lo);
    -(w1 * y * pc.ln()) - w0 * (T::one() - y) * (T::one() - pc).ln()
}

fn bce_grad<T: Scalar>(p: T, y: T, w0: T, w1: T) -> T {
    let lo = T::lit(BCE_CLAMP);
    if p < lo || p > T::one() - lo {
        return T::zero();
    }
    -(w1 * y / p) + w0 * (T::one() - y) / (T::one() - p)
}

/// Scaled keep-mask (`0` or `1/(1-p)`) drawn from the counter stream of `(key, site)`.
pub fn dropout_mask<T: Scalar>(key: DropoutKey, site: u64, n: usize, p: f64) -> Vec<T> {
    let mut rng = counter_stream(key.seed, site, key.call);
    let keep = T::lit(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds the gradients of every bound trainable parameter into `store`.
    pub fn accumulate_into(&self, graph: &Graph<T>, store: &mut ParamStore<T>) {
        for (name, v) in graph.bound_params() {
            if let (Some(g), Some(p)) = (self.get(v), store.get_mut(name)) {
                if p.trainable {
                    p.grad.add_assign(g);
                }
            }
        }
    }
}
