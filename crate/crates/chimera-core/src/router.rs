//! The expert router: one linear layer over the general encoder's CLS
//! feature, deciding whether to invoke an expert and which one, plus its
//! classification loss.

use crate::error::{ChimeraError, Result};
use crate::tensor::Tensor;

/// Router output: logits over the `N_e + 1` classes (class 0 = no expert)
/// and the argmax choice, ties broken toward the lowest index.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub logits: Vec<f64>,
    pub choice: usize,
}

impl RoutingDecision {
    pub fn invokes_expert(&self) -> bool {
        self.choice != 0
    }
}

/// logits = cls · W + b, choice = argmax. The same matmul/bias kernels run
/// on the training tape, so inference and training logits agree bitwise.
pub fn route(cls: &Tensor, w: &Tensor, b: &Tensor) -> Result<RoutingDecision> {
    if cls.rows != 1 || cls.cols != w.rows {
        return Err(ChimeraError::config(format!(
            "router expects cls 1x{}, got {}x{}",
            w.rows, cls.rows, cls.cols
        )));
    }
    if b.rows != 1 || b.cols != w.cols {
        return Err(ChimeraError::config("router bias shape mismatch"));
    }
    let logits = cls.matmul(w).add_row(b);
    let choice = logits.argmax_row(0);
    Ok(RoutingDecision { logits: logits.data, choice })
}

/// Softmax cross-entropy of the routing logits against the true class.
pub fn router_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(ChimeraError::data(format!(
            "router label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let maxv = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = maxv + logits.iter().map(|v| (v - maxv).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Analytic gradient of [`router_loss`] w.r.t. the logits:
/// softmax(logits) - onehot(label).
pub fn router_loss_grad(logits: &[f64], label: usize) -> Vec<f64> {
    let maxv = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - maxv).exp()).sum();
    logits
        .iter()
        .enumerate()
        .map(|(i, v)| (v - maxv).exp() / z - if i == label { 1.0 } else { 0.0 })
        .collect()
}
