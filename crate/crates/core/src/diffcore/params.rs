use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Numeric,
    Visual,
    Other,
}

impl ParamGroup {
    /// Group by name prefix: `num.*` numeric encoder, `vis.*` visual encoder.
    pub fn of(name: &str) -> Self {
        if name.starts_with("num.") {
            Self::Numeric
        } else if name.starts_with("vis.") {
            Self::Visual
        } else {
            Self::Other
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    pub group: ParamGroup,
}

/// Named trainable tensors with freeze flags and accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) {
        let grad = Tensor::zeros(value.shape());
        let group = ParamGroup::of(name);
        self.params.insert(name.to_string(), Param { value, grad, trainable: true, group });
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).map(|p| &p.value).ok_or_else(|| invalid!("unknown parameter `{name}`"))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self.params.get_mut(name).ok_or_else(|| invalid!("unknown parameter `{name}`"))?;
        if p.value.shape() != value.shape() {
            return Err(invalid!("shape mismatch for `{name}`: {:?} vs {:?}", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Marks exactly the parameters whose name starts with one of `prefixes` as trainable.
    pub fn freeze_all_except(&mut self, prefixes: &[&str]) {
        for (name, p) in self.params.iter_mut() {
            p.trainable = prefixes.iter().any(|pre| name.starts_with(pre));
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params.values_mut().for_each(|p| p.trainable = trainable);
    }

    /// Little-endian byte image of one parameter's value.
    pub fn value_bytes(&self, name: &str) -> Option<Vec<u8>> {
        self.params.get(name).map(|p| p.value.data().iter().flat_map(|v| v.as_f64().to_le_bytes()).collect())
    }

    /// Binary format: `u32` count, then per parameter a `u32`-prefixed UTF-8
    /// name, a trainable byte and a tensor dump.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, p) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[p.trainable as u8])?;
            p.value.write_binary(w)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let n = u32::from_le_bytes(b4);
        let mut store = Self::new();
        for _ in 0..n {
            r.read_exact(&mut b4)?;
            let mut name = vec![0u8; u32::from_le_bytes(b4) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Parse(e.to_string()))?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let value = Tensor::read_binary(r)?;
            store.insert(&name, value);
            store.params.get_mut(&name).unwrap().trainable = flag[0] != 0;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_follow_prefix() {
        assert_eq!(ParamGroup::of("num.in.w"), ParamGroup::Numeric);
        assert_eq!(ParamGroup::of("vis.pos"), ParamGroup::Visual);
        assert_eq!(ParamGroup::of("gat.w"), ParamGroup::Other);
    }

    #[test]
    fn binary_roundtrip_keeps_flags() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        s.insert("b", Tensor::from_f64(&[1, 1], &[3.0]).unwrap());
        s.freeze_all_except(&["b"]);
        let mut buf = Vec::new();
        s.write_binary(&mut buf).unwrap();
        let back = ParamStore::<f64>::read_binary(&mut buf.as_slice()).unwrap();
        assert_eq!(back.value("a").unwrap(), s.value("a").unwrap());
        assert!(!back.get("a").unwrap().trainable);
        assert!(back.get("b").unwrap().trainable);
    }
}
