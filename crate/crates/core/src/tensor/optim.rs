//! Gradient-descent optimizers over named parameters.
//!
//! State is keyed by parameter name so parameters can join mid-run (the
//! per-module calibration stages activate new quantizers over time) while
//! earlier ones keep their moment estimates.

use std::collections::HashMap;

use crate::error::{QartError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone)]
struct Slot {
    steps: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimKind,
    pub lr: f64,
    state: HashMap<String, Slot>,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Optimizer {
        Optimizer {
            kind: OptimKind::Sgd,
            lr,
            state: HashMap::new(),
        }
    }

    /// Adam with the conventional defaults (0.9, 0.999, 1e-8).
    pub fn adam(lr: f64) -> Optimizer {
        Optimizer {
            kind: OptimKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            state: HashMap::new(),
        }
    }

    /// Apply one update to `param` from `param.grad`. A parameter without a
    /// gradient this step is left untouched (its moments do not decay).
    pub fn step(&mut self, name: &str, param: &mut Tensor) -> Result<()> {
        let Some(grad) = param.grad.take() else {
            return Ok(());
        };
        if grad.len() != param.numel() {
            return Err(QartError::dim(format!(
                "gradient length {} vs parameter {} for {}",
                grad.len(),
                param.numel(),
                name
            )));
        }
        match self.kind {
            OptimKind::Sgd => {
                for (p, g) in param.data_mut().iter_mut().zip(&grad) {
                    *p -= self.lr * g;
                }
            }
            OptimKind::Adam { beta1, beta2, eps } => {
                let slot = self.state.entry(name.to_string()).or_insert_with(|| Slot {
                    steps: 0,
                    m: vec![0.0; grad.len()],
                    v: vec![0.0; grad.len()],
                });
                if slot.m.len() != grad.len() {
                    return Err(QartError::dim(format!(
                        "optimizer state length {} vs gradient {} for {}",
                        slot.m.len(),
                        grad.len(),
                        name
                    )));
                }
                slot.steps += 1;
                let bc1 = 1.0 - beta1.powi(slot.steps as i32);
                let bc2 = 1.0 - beta2.powi(slot.steps as i32);
                for ((p, &g), (m, v)) in param
                    .data_mut()
                    .iter_mut()
                    .zip(&grad)
                    .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
