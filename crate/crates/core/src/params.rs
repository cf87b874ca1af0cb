//! Named parameter trees.

use std::collections::BTreeMap;

use crate::error::{DiveError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Parameters keyed by stable dotted names, iterated in ascending name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| DiveError::Index(format!("no parameter named `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| DiveError::Index(format!("no parameter named `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors
            .values()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Marks exactly the parameters accepted by `pred` as trainable.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, t) in self.tensors.iter_mut() {
            t.set_requires_grad(pred(name));
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable(|_| false);
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    /// Binds a parameter into `g` as a named leaf.
    pub fn bind(&self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        Ok(g.param(name, self.get(name)?))
    }

    /// Accumulates the gradients of every named leaf of `g` into this store.
    pub fn absorb_grads(&mut self, g: &Graph<T>) -> Result<()> {
        for (name, grad) in g.param_grads() {
            let t = self.get_mut(name)?;
            if t.requires_grad() {
                t.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    /// Names whose values differ bitwise between `self` and `other`,
    /// including names present in only one of them.
    pub fn changed_names(&self, other: &Self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                Some(o) if t.bit_eq(o) => {}
                _ => out.push(name.clone()),
            }
        }
        for name in other.tensors.keys() {
            if !self.tensors.contains_key(name) {
                out.push(name.clone());
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

impl<T> FromIterator<(String, Tensor<T>)> for ParamStore<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn changed_names_detects_edits_and_missing() {
        let mut a = ParamStore::<f32>::new();
        a.insert("x", Tensor::zeros(&[2]));
        a.insert("y", Tensor::zeros(&[2]));
        let mut b = a.clone();
        assert!(a.changed_names(&b).is_empty());
        b.get_mut("x").unwrap().data_mut()[0] = 1.0;
        b.insert("z", Tensor::zeros(&[1]));
        assert_eq!(a.changed_names(&b), vec!["x".to_string(), "z".to_string()]);
    }

    #[test]
    fn absorb_only_trainable() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::ones(&[2]));
        p.set_trainable(|n| n == "w");
        let mut g = Graph::new();
        let w = p.bind(&mut g, "w").unwrap();
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        p.absorb_grads(&g).unwrap();
        assert_eq!(p.get("w").unwrap().grad().unwrap(), &[1.0, 1.0]);
        assert_eq!(p.num_trainable(), 2);
    }
}
