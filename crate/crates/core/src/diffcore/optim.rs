use std::collections::BTreeMap;

use super::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;

/// Adaptive-moment optimiser with decoupled weight decay and per-group rates.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    lrs: BTreeMap<ParamGroup, f64>,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr_numeric: f64, lr_visual: f64, lr_other: f64, weight_decay: f64) -> Self {
        let lrs = BTreeMap::from([
            (ParamGroup::Numeric, lr_numeric),
            (ParamGroup::Visual, lr_visual),
            (ParamGroup::Other, lr_other),
        ]);
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, lrs, moments: BTreeMap::new(), step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients; frozen parameters are skipped.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let lr = self.lrs[&p.group];
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::zero(); p.value.len()], vec![T::zero(); p.value.len()]));
            let decay = T::lit(1.0 - lr * self.weight_decay);
            let grad = p.grad.data();
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                let gi = grad[i];
                m[i] = T::lit(b1) * m[i] + T::lit(1.0 - b1) * gi;
                v[i] = T::lit(b2) * v[i] + T::lit(1.0 - b2) * gi * gi;
                let mhat = m[i].as_f64() / c1;
                let vhat = v[i].as_f64() / c2;
                *x = *x * decay - T::lit(lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
        let before = s.value("w").unwrap().clone();
        let mut opt = AdamW::new(1e-3, 1e-3, 1e-3, 0.0);
        for _ in 0..3 {
            opt.step(&mut s);
        }
        assert_eq!(s.value("w").unwrap(), &before);
    }

    #[test]
    fn frozen_params_never_move() {
        let mut s = ParamStore::<f64>::new();
        s.insert("num.w", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        s.insert("head.w", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        s.freeze_all_except(&["head."]);
        for (_, p) in s.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 1.0);
        }
        let mut opt = AdamW::new(0.1, 0.1, 0.1, 0.01);
        opt.step(&mut s);
        assert_eq!(s.value("num.w").unwrap().data(), &[1.0, 2.0]);
        assert_ne!(s.value("head.w").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::from_f64(&[1], &[0.0]).unwrap());
        s.get_mut("w").unwrap().grad.data_mut()[0] = 4.0;
        let mut opt = AdamW::new(0.01, 0.01, 0.01, 0.0);
        opt.step(&mut s);
        assert!((s.value("w").unwrap().data()[0] + 0.01).abs() < 1e-9);
    }
}
