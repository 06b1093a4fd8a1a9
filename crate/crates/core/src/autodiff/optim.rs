use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::ParameterSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Plain SGD or Adam with bias correction.
///
/// Moment buffers are keyed by parameter name and created on first use.
/// Every trainable parameter must carry a gradient when [`Optimizer::step`]
/// runs; gradients are cleared afterwards.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    first_moment: HashMap<String, Vec<f64>>,
    second_moment: HashMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64) -> Self {
        Optimizer::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Optimizer::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        Optimizer {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: HashMap::new(),
            second_moment: HashMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        for (name, t) in params.iter() {
            if t.requires_grad() && t.grad().is_none() {
                return Err(Error::contract(
                    "autodiff",
                    format!("parameter '{name}' has no gradient"),
                ));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        for (name, tensor) in params.iter_mut() {
            if !tensor.requires_grad() {
                continue;
            }
            let grad = tensor.grad().expect("checked above").to_vec();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in tensor.values_mut().iter_mut().zip(&grad) {
                        *p -= self.learning_rate * g;
                    }
                }
                OptimizerKind::Adam => {
                    let n = grad.len();
                    let m = self
                        .first_moment
                        .entry(name.to_string())
                        .or_insert_with(|| vec![0.0; n]);
                    let v = self
                        .second_moment
                        .entry(name.to_string())
                        .or_insert_with(|| vec![0.0; n]);
                    if m.len() != n || v.len() != n {
                        return Err(Error::Dimension {
                            op: "adam",
                            lhs: vec![m.len()],
                            rhs: tensor.shape().to_vec(),
                        });
                    }
                    let c1 = 1.0 - self.beta1.powi(t);
                    let c2 = 1.0 - self.beta2.powi(t);
                    for (((p, g), mi), vi) in tensor
                        .values_mut()
                        .iter_mut()
                        .zip(&grad)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                    }
                }
            }
        }
        params.zero_grads();
        Ok(())
    }
}
