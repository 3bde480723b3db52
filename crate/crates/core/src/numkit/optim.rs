use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::ParameterStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer over one [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {learning_rate}"
            )));
        }
        Ok(Optimizer {
            kind,
            learning_rate,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Optimizer::new(OptimizerKind::adam(), learning_rate)
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Optimizer::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update from the populated gradient buffers, then zero them.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
            return Err(Error::Contract(format!(
                "parameter {:?} has no gradient buffer",
                p.name
            )));
        }
        self.step += 1;
        if self.first_moment.len() != store.len() {
            self.first_moment = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        let lr = self.learning_rate;
        for (idx, p) in store.params_mut().iter_mut().enumerate() {
            let grad = p.grad.as_mut().expect("checked above");
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.value.data_mut().iter_mut().zip(grad.data()) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let t = self.step as i32;
                    let bias1 = 1.0 - beta1.powi(t);
                    let bias2 = 1.0 - beta2.powi(t);
                    let m = &mut self.first_moment[idx];
                    let v = &mut self.second_moment[idx];
                    for (j, (w, g)) in p.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                        let m_hat = m[j] / bias1;
                        let v_hat = v[j] / bias2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(())
    }
}
