//! Value-level wrappers over the tape for callers that do not need gradients.

use super::graph::{DropoutKey, Graph};
use super::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb)?;
    Ok(g.value(c).clone())
}

/// `mask_bias` holds `0` for allowed and [`super::MASK_BIAS`] for disallowed entries.
pub fn masked_softmax<T: Scalar>(logits: &Tensor<T>, mask_bias: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let s = g.masked_softmax(x, Some(mask_bias))?;
    Ok(g.value(s).clone())
}

pub fn layernorm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (vx, vg, vb) = (g.constant(x.clone()), g.constant(gain.clone()), g.constant(bias.clone()));
    let y = g.layernorm(vx, vg, vb)?;
    Ok(g.value(y).clone())
}

/// Inverted dropout; `training == false` is the identity.
pub fn dropout<T: Scalar>(x: &Tensor<T>, p: f64, key: DropoutKey, site: u64, training: bool) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    if training {
        g.set_dropout(Some(key));
    }
    let vx = g.constant(x.clone());
    let y = g.dropout(vx, p, site)?;
    Ok(g.value(y).clone())
}
