use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Rescale the gradient to at most this 2-norm before stepping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

/// First-order optimizer over a flat parameter vector. Only entries with
/// `mask[i] == true` are ever written.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    mask: Vec<bool>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, mask: Vec<bool>) -> Self {
        let n = mask.len();
        Self {
            cfg,
            mask,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.learning_rate = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.mask.len());
        self.step += 1;
        let mut scale = 1.0;
        if let Some(c) = self.cfg.clip_norm {
            let n = grad
                .iter()
                .zip(&self.mask)
                .filter(|(_, m)| **m)
                .map(|(g, _)| g * g)
                .sum::<f64>()
                .sqrt();
            if n > c {
                scale = c / n;
            }
        }
        let lr = self.cfg.learning_rate;
        let (bc1, bc2) = (
            1.0 - BETA1.powi(self.step as i32),
            1.0 - BETA2.powi(self.step as i32),
        );
        for i in 0..params.len() {
            if !self.mask[i] {
                continue;
            }
            let g = grad[i] * scale;
            match self.cfg.kind {
                OptimizerKind::Sgd => params[i] -= lr * (g + self.cfg.weight_decay * params[i]),
                OptimizerKind::Adam | OptimizerKind::AdamW => {
                    let g = if self.cfg.kind == OptimizerKind::Adam {
                        g + self.cfg.weight_decay * params[i]
                    } else {
                        g
                    };
                    self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
                    self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
                    let upd = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + EPS);
                    if self.cfg.kind == OptimizerKind::AdamW {
                        params[i] -= lr * self.cfg.weight_decay * params[i];
                    }
                    params[i] -= lr * upd;
                }
            }
        }
    }
}
