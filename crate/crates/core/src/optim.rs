//! Adam optimizer over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, ParamStore};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    steps: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, p)| Mat::zeros(p.rows(), p.cols())).collect();
        Self { config, m: zeros(), v: zeros(), steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update at learning rate `lr`. Parameters without a gradient are
    /// left alone.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps, clip_norm } = self.config;
        let clip = match clip_norm {
            Some(max) => {
                let n = grads.norm();
                if n > max && n > 0.0 { max / n } else { 1.0 }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        for id in params.ids().collect::<Vec<_>>() {
            let Some(g) = grads.param(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id);
            for i in 0..p.len() {
                let gi = g.data()[i] * clip;
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use std::rc::Rc;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Mat::filled(1, 3, 5.0));
        let mut opt = Adam::new(&store, AdamConfig { clip_norm: None, ..Default::default() });
        let target = Rc::new(Mat::from_vec(1, 3, vec![1.0, -2.0, 0.5]));
        for _ in 0..2000 {
            let mut t = Tape::new();
            let x = t.param(&store, w);
            let l = t.mse(x, target.clone());
            let g = t.backward(l);
            opt.step(&mut store, &g, 0.01);
        }
        for (a, b) in store.get(w).data().iter().zip(target.data()) {
            assert!((a - b).abs() < 1e-2);
        }
    }
}
