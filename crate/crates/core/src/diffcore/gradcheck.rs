use std::collections::BTreeMap;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(invalid!("finite-difference step {eps} outside [1e-7, 1e-4]"));
    }
    Ok(())
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

fn scalar_out<T: Scalar>(g: &Graph<T>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(invalid!("checked function must return a scalar, got {:?}", t.shape()));
    }
    let y = t.data()[0].as_f64();
    if !y.is_finite() {
        return Err(Error::Numeric(format!("non-finite function value {y}")));
    }
    Ok(y)
}

/// Compares tape gradients of a scalar function against central differences.
///
/// Returns the maximum over all input coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<T, F>(inputs: &[Tensor<T>], eps: f64, f: F) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_out(&g, out)?;
    let grads = g.backward(out)?;

    let eval = |xs: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_out(&g, out)
    };

    let mut worst = 0f64;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        for c in 0..inputs[i].len() {
            let analytic = grads.get(*v).map_or(0.0, |t| t.data()[c].as_f64());
            if !analytic.is_finite() {
                return Err(Error::Numeric(format!("non-finite analytic gradient at input {i}[{c}]")));
            }
            let x0 = work[i].data()[c];
            work[i].data_mut()[c] = x0 + T::lit(eps);
            let fp = eval(&work)?;
            work[i].data_mut()[c] = x0 - T::lit(eps);
            let fm = eval(&work)?;
            work[i].data_mut()[c] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    Ok(worst)
}

/// Outcome of [`grad_check_params`].
#[derive(Clone, Debug)]
pub struct ParamGradReport {
    pub max_rel_err: f64,
    pub per_param: BTreeMap<String, f64>,
    /// Largest |gradient| accumulated into any frozen parameter (expected `0`).
    pub frozen_grad_max: f64,
}

/// [`grad_check`] over the parameters of a store; frozen parameters are not
/// perturbed and must end with an all-zero gradient slot.
pub fn grad_check_params<T, F>(store: &ParamStore<T>, eps: f64, f: F) -> Result<ParamGradReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    check_eps(eps)?;
    let mut analytic = store.clone();
    analytic.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, &analytic)?;
    scalar_out(&g, out)?;
    g.backward(out)?.accumulate_into(&g, &mut analytic);

    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        scalar_out(&g, out)
    };

    let mut per_param = BTreeMap::new();
    let mut frozen_grad_max = 0f64;
    let mut work = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        let p = analytic.get(name).unwrap();
        if !p.trainable {
            let m = p.grad.data().iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max);
            frozen_grad_max = frozen_grad_max.max(m);
            continue;
        }
        let mut worst = 0f64;
        for c in 0..p.value.len() {
            let a = p.grad.data()[c].as_f64();
            let x0 = work.get(name).unwrap().value.data()[c];
            work.get_mut(name).unwrap().value.data_mut()[c] = x0 + T::lit(eps);
            let fp = eval(&work)?;
            work.get_mut(name).unwrap().value.data_mut()[c] = x0 - T::lit(eps);
            let fm = eval(&work)?;
            work.get_mut(name).unwrap().value.data_mut()[c] = x0;
            worst = worst.max(rel_err(a, (fp - fm) / (2.0 * eps)));
        }
        per_param.insert(name.clone(), worst);
    }
    let max_rel_err = per_param.values().copied().fold(0.0, f64::max);
    Ok(ParamGradReport { max_rel_err, per_param, frozen_grad_max })
}
