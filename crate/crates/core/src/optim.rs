//! First-order optimizers over a flat parameter buffer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Points per MSE minibatch, pairs per ranking minibatch.
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    #[serde(default = "default_init_scale")]
    pub weight_init_scale: f64,
    /// L2 penalty coefficient; zero leaves the objective unregularized.
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_init_scale() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            weight_init_scale: 1.0,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::validation("train.iterations", "must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::validation("train.batch_size", "must be >= 1"));
        }
        // Zero is allowed: it is the documented way to freeze parameters.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(
                "train.learning_rate",
                format!("{} must be finite and >= 0", self.learning_rate),
            ));
        }
        if !(self.weight_init_scale > 0.0) {
            return Err(Error::validation("train.weight_init_scale", "must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::validation("train.weight_decay", "must be >= 0"));
        }
        if let OptimizerConfig::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::validation(
                    "train.optimizer",
                    "adam needs beta1, beta2 in [0, 1) and eps > 0",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    lr: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(config: &TrainConfig, n_params: usize) -> Self {
        let moments = matches!(config.optimizer, OptimizerConfig::Adam { .. });
        Optimizer {
            config: config.optimizer,
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            m: if moments { vec![0.0; n_params] } else { Vec::new() },
            v: if moments { vec![0.0; n_params] } else { Vec::new() },
            t: 0,
        }
    }

    /// One descent step. `grad` is consumed as scratch.
    pub fn step(&mut self, params: &mut [f64], grad: &mut [f64]) {
        if self.weight_decay > 0.0 {
            for (g, p) in grad.iter_mut().zip(params.iter()) {
                *g += self.weight_decay * p;
            }
        }
        if self.lr == 0.0 {
            return;
        }
        match self.config {
            OptimizerConfig::Sgd => {
                for (p, g) in params.iter_mut().zip(grad.iter()) {
                    *p -= self.lr * g;
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            optimizer: OptimizerConfig::Sgd,
            ..TrainConfig::default()
        };
        let mut opt = Optimizer::new(&cfg, 2);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &mut [2.0, -4.0]);
        assert!((p[0] - 0.8).abs() < 1e-15 && (p[1] + 0.6).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig {
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut opt = Optimizer::new(&cfg, 2);
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &mut [3.0, -0.5]);
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let cfg = TrainConfig {
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let mut opt = Optimizer::new(&cfg, 1);
        let mut p = vec![5.0];
        for _ in 0..2000 {
            let mut g = vec![2.0 * (p[0] - 1.5)];
            opt.step(&mut p, &mut g);
        }
        assert!((p[0] - 1.5).abs() < 1e-3);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: f64::NAN,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
