//! Named parameter registry shared by the model, the optimizer, the
//! checkpoint format, and the gradient checker.
//!
//! Parameters are tracked leaf tensors. Replacing a parameter's data (an
//! optimizer step, a checkpoint load, a gradcheck perturbation) installs a
//! fresh leaf, so each training step builds its graph from the current
//! values. Registration order is deterministic and defines optimizer-state
//! alignment.

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{Elem, Tensor};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct ParamStore<T: Elem> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Elem> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore {
            entries: self.entries.clone(),
            index: self.index.clone(),
        }
    }
}

impl<T: Elem> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn register(&mut self, name: &str, shape: &[usize], data: Vec<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::invalid("param", format!("duplicate parameter name {name}")));
        }
        let t = Tensor::param(shape, data)?;
        self.entries.push((name.to_string(), t));
        self.index.insert(name.to_string(), self.entries.len() - 1);
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Install new values for a parameter; shape must be preserved.
    pub fn replace_data(&mut self, id: ParamId, data: Vec<T>) -> Result<()> {
        let (name, old) = &self.entries[id.0];
        if data.len() != old.numel() {
            return Err(Error::invalid(
                "param",
                format!("{name}: replacement has {} values, expected {}", data.len(), old.numel()),
            ));
        }
        let shape = old.shape().to_vec();
        self.entries[id.0].1 = Tensor::param(&shape, data)?;
        Ok(())
    }

    pub fn replace_by_name(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let idx = self
            .index
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("param", format!("unknown parameter {name}")))?;
        self.replace_data(ParamId(idx), data)
    }

    /// Copy with one element of one parameter nudged by `delta` (for finite
    /// differences). Fresh leaves everywhere so the closure re-tracks.
    pub fn perturbed(&self, id: ParamId, elem: usize, delta: T) -> Self {
        let mut out = self.clone();
        let (name, t) = &self.entries[id.0];
        let mut data = t.data().to_vec();
        data[elem] += delta;
        out.entries[id.0] = (
            name.clone(),
            Tensor::param(t.shape(), data).expect("shape preserved"),
        );
        out
    }
}

// ── Initialization ──────────────────────────────────────────────────

/// Uniform(-bound, bound) draws.
pub fn uniform_init<T: Elem>(rng: &mut CounterRng, n: usize, bound: f64) -> Vec<T> {
    (0..n).map(|_| T::from_f64(rng.uniform(-bound, bound))).collect()
}

/// Fan-in scaled uniform init, the torch linear/conv default.
pub fn fan_in_init<T: Elem>(rng: &mut CounterRng, n: usize, fan_in: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    uniform_init(rng, n, bound)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_and_replace() {
        let mut store = ParamStore::<f32>::new();
        let id = store.register("w", &[2, 2], vec![1.0; 4]).unwrap();
        assert!(store.register("w", &[1], vec![0.0]).is_err());
        assert_eq!(store.get(id).data(), &[1.0; 4]);
        store.replace_data(id, vec![2.0; 4]).unwrap();
        assert_eq!(store.get(id).data(), &[2.0; 4]);
        assert!(store.replace_data(id, vec![0.0; 3]).is_err());
        assert!(store.get(id).requires_grad());
    }

    #[test]
    fn perturbed_changes_one_element() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w", &[3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = store.perturbed(id, 1, 0.5);
        assert_eq!(p.get(id).data(), &[1.0, 2.5, 3.0]);
        assert_eq!(store.get(id).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn init_is_deterministic() {
        let mut a = CounterRng::new(5);
        let mut b = CounterRng::new(5);
        let va: Vec<f32> = fan_in_init(&mut a, 8, 4);
        let vb: Vec<f32> = fan_in_init(&mut b, 8, 4);
        assert_eq!(va, vb);
        assert!(va.iter().all(|v| v.abs() <= 0.5));
    }
}
