//! Finite-difference verification of reverse-mode gradients.
//!
//! f64 only: central differences are too noisy in f32 to validate a 1e-4
//! relative tolerance. The checker re-evaluates the loss closure with each
//! parameter element nudged by ±eps and compares against the analytic
//! gradient, reporting the worst relative error
//! `|a - n| / max(1, |a|, |n|)`.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// No gradient flowed to this parameter; analytic side treated as zero.
    pub disconnected: bool,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub tol: f64,
    pub max_rel_err: f64,
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs())
}

/// Check analytic gradients of `loss_fn` with respect to every parameter in
/// `store` against central finite differences with step `eps`.
pub fn gradcheck<F>(store: &ParamStore<f64>, loss_fn: F, eps: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&ParamStore<f64>) -> Result<Tensor<f64>>,
{
    let loss = loss_fn(store)?;
    if loss.numel() != 1 {
        return Err(Error::invalid(
            "gradcheck",
            format!("loss must be scalar, got shape {:?}", loss.shape()),
        ));
    }
    let grads = loss.backward()?;

    let mut params = Vec::with_capacity(store.len());
    let mut max_rel = 0.0f64;
    for i in 0..store.len() {
        let id = ParamId(i);
        let tensor = store.get(id);
        let analytic: Vec<f64> = match grads.get(tensor) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tensor.numel()],
        };
        let disconnected = grads.get(tensor).is_none();
        let mut worst = 0.0f64;
        for e in 0..tensor.numel() {
            let plus = loss_fn(&store.perturbed(id, e, eps))?.item();
            let minus = loss_fn(&store.perturbed(id, e, -eps))?.item();
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[e], numeric));
        }
        max_rel = max_rel.max(worst);
        params.push(ParamCheck {
            name: store.name(id).to_string(),
            max_rel_err: worst,
            disconnected,
        });
    }
    Ok(GradcheckReport { tol, max_rel_err: max_rel, params })
}
