//! Adam with optional decoupled weight decay.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::encoder::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<P> {
    pub config: AdamConfig,
    m: P,
    v: P,
    t: u64,
}

impl<P: Parameters> Adam<P> {
    pub fn new(params: &P, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of `params` along `grads`, with learning rate scaled by `lr_scale`.
    pub fn step(&mut self, params: &mut P, grads: &P, lr_scale: f64) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let lr = c.lr * lr_scale;
        let mut ms = self.m.tensors_mut();
        let mut vs = self.v.tensors_mut();
        let gs = grads.tensors();
        for (((_, mut p), (_, m)), ((_, v), (_, g))) in params
            .tensors_mut()
            .into_iter()
            .zip(ms.iter_mut())
            .zip(vs.iter_mut().zip(gs.iter()))
        {
            Zip::from(&mut p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                    *p -= lr * (update + c.weight_decay * *p);
                });
        }
    }
}
