//! Adam with bias correction over a [`ParamStore`].

use super::{Elem, Gradients};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators aligned with parameter-store order.
pub struct AdamState<T: Elem> {
    pub cfg: AdamConfig,
    pub step_count: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Elem> AdamState<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let m = store.iter().map(|(_, t)| vec![T::ZERO; t.numel()]).collect();
        let v = store.iter().map(|(_, t)| vec![T::ZERO; t.numel()]).collect();
        AdamState { cfg, step_count: 0, m, v }
    }

    pub fn moments(&self, i: usize) -> (&[T], &[T]) {
        (&self.m[i], &self.v[i])
    }

    pub(crate) fn from_raw(cfg: AdamConfig, step_count: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Self {
        AdamState { cfg, step_count, m, v }
    }
}

/// One Adam update over every parameter. Parameters whose gradient is absent
/// or exactly zero are left untouched (moments included), so unused heads
/// never drift; for live parameters this is the standard bias-corrected
/// update. Deterministic: same params, grads, and state give bitwise equal
/// results.
pub fn adam_step<T: Elem>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::invalid(
            "adam_step",
            format!("state tracks {} params, store has {}", state.m.len(), store.len()),
        ));
    }
    state.step_count += 1;
    let t = state.step_count;
    let c = state.cfg;
    let bc1 = 1.0 - c.beta1.powi(t as i32);
    let bc2 = 1.0 - c.beta2.powi(t as i32);
    let lr = T::from_f64(c.lr);
    let b1 = T::from_f64(c.beta1);
    let b2 = T::from_f64(c.beta2);
    let one_m_b1 = T::from_f64(1.0 - c.beta1);
    let one_m_b2 = T::from_f64(1.0 - c.beta2);
    let eps = T::from_f64(c.eps);
    let ibc1 = T::from_f64(1.0 / bc1);
    let ibc2 = T::from_f64(1.0 / bc2);

    for i in 0..store.len() {
        let id = ParamId(i);
        let tensor = store.get(id);
        let Some(g) = grads.get(tensor) else { continue };
        if g.len() != tensor.numel() {
            return Err(Error::invalid(
                "adam_step",
                format!("{}: gradient has {} values, param {}", store.name(id), g.len(), tensor.numel()),
            ));
        }
        if g.iter().all(|&v| v == T::ZERO) {
            continue;
        }
        let mut new = tensor.data().to_vec();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..new.len() {
            m[j] = b1 * m[j] + one_m_b1 * g[j];
            v[j] = b2 * v[j] + one_m_b2 * g[j] * g[j];
            let mhat = m[j] * ibc1;
            let vhat = v[j] * ibc2;
            new[j] = new[j] - lr * mhat / (vhat.sqrt() + eps);
        }
        store.replace_data(id, new)?;
    }
    Ok(())
}
