//! Per-layer first-order optimizers with a step-decay schedule.

use crate::error::Result;
use crate::network::ModelParams;

use super::config::{OptimizerConfig, OptimizerKind};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// `base · factor^⌊epoch / every⌋` for a zero-based epoch.
pub fn learning_rate(cfg: &OptimizerConfig, epoch: usize) -> f64 {
    cfg.learning_rate * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<i32>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.specs().iter().map(|s| vec![0.0; s.num_params()]).collect();
        let adam = kind == OptimizerKind::Adam;
        Self {
            kind,
            m: if adam { zeros.clone() } else { Vec::new() },
            v: if adam { zeros } else { Vec::new() },
            t: vec![0; params.num_layers()],
        }
    }

    /// Descends along `grad` for one layer.
    pub fn step(&mut self, params: &mut ModelParams, layer: usize, grad: &[f64], lr: f64) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => params.add_to_layer(layer, grad, -lr),
            OptimizerKind::Adam => {
                self.t[layer] += 1;
                let t = self.t[layer];
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                let m = &mut self.m[layer];
                let v = &mut self.v[layer];
                let mut dir = Vec::with_capacity(grad.len());
                for ((mi, vi), &g) in m.iter_mut().zip(v.iter_mut()).zip(grad) {
                    *mi = BETA1 * *mi + (1.0 - BETA1) * g;
                    *vi = BETA2 * *vi + (1.0 - BETA2) * g * g;
                    dir.push((*mi / c1) / ((*vi / c2).sqrt() + EPS));
                }
                params.add_to_layer(layer, &dir, -lr)
            }
        }
    }
}
