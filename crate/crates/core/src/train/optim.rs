use serde::{Deserialize, Serialize};

use crate::model::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Plain SGD or Adam with global-norm clipping and optional linear warmup.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip: f64,
    warmup: usize,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: OptimizerKind,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        clip: f64,
        warmup: usize,
        params: &ParamStore,
    ) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { kind, lr, beta1, beta2, eps, clip, warmup, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate used by the next step.
    pub fn current_lr(&self) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((self.step + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }

    /// Rescales `grads` in place so their global L2 norm is at most the clip
    /// norm. Returns the norm before clipping.
    pub fn clip(&self, grads: &mut [Vec<f64>]) -> f64 {
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if self.clip > 0.0 && norm > self.clip {
            let s = self.clip / norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
        norm
    }

    /// Clips and applies one update. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, mut grads: Vec<Vec<f64>>) -> f64 {
        let norm = self.clip(&mut grads);
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(&grads).enumerate() {
            let data = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in data.iter_mut().zip(g) {
                        *w -= lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - self.beta1.powi(t);
                    let bc2 = 1.0 - self.beta2.powi(t);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for k in 0..data.len() {
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                        let mh = m[k] / bc1;
                        let vh = v[k] / bc2;
                        data[k] -= lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
        norm
    }
}
