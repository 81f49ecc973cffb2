use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParameterSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn build(self) -> Optimizer {
        Optimizer {
            config: self,
            moments: BTreeMap::new(),
            steps: 0,
        }
    }
}

/// First-order optimizer state. Updates visit parameters in path order.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    steps: u64,
}

impl Optimizer {
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &Gradients) {
        self.steps += 1;
        let t = self.steps as f64;
        for (path, g) in grads.iter() {
            let Some(p) = params.get_mut(path) else { continue };
            match self.config {
                OptimizerConfig::Sgd { lr } => {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
                OptimizerConfig::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    let (m, v) = self
                        .moments
                        .entry(path.to_string())
                        .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                    let c1 = 1.0 - beta1.powf(t);
                    let c2 = 1.0 - beta2.powf(t);
                    for (((w, d), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * d;
                        *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
