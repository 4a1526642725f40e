//! Optimisers, learning-rate schedule and gradient clipping.

use crate::model::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

use super::config::OptimizerKind;

/// Linear warmup to `lr0`, then cosine decay to `lr0 * lrf` at `total`.
pub fn learning_rate(step: usize, total: usize, warmup: usize, lr0: f64, lrf: f64) -> f64 {
    if step < warmup {
        return lr0 * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let p = ((step - warmup) as f64 / span as f64).min(1.0);
    let end = lr0 * lrf;
    end + (lr0 - end) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Global L2 norm of the gradients.
pub fn global_norm(grads: &[(ParamId, Tensor<f32>)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|&v| v as f64 * v as f64)
        .sum::<f64>()
        .sqrt()
}

/// Rescales the gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor<f32>)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Per-parameter optimiser state, indexed like the parameter store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64, store: &ParamStore) -> Self {
        let zeros = || store.entries().iter().map(|e| vec![0.0; e.tensor.len()]).collect();
        Optimizer {
            kind,
            weight_decay,
            first: zeros(),
            second: match kind {
                OptimizerKind::Adam { .. } => zeros(),
                OptimizerKind::Sgd { .. } => Vec::new(),
            },
            steps: 0,
        }
    }

    /// Applies one update. Weight decay acts on convolution kernels only,
    /// not on biases or batch-norm affine terms.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor<f32>)], lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        for (id, g) in grads {
            let entry = &mut store.entries_mut()[id.0];
            if entry.kind != ParamKind::Weight {
                continue;
            }
            let decay = if entry.tensor.shape().len() > 1 {
                self.weight_decay as f32
            } else {
                0.0
            };
            let w = entry.tensor.data_mut();
            let m = &mut self.first[id.0];
            match self.kind {
                OptimizerKind::Sgd { momentum, nesterov } => {
                    let (mu, lr) = (momentum as f32, lr as f32);
                    for ((wi, &gi), mi) in w.iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        let gi = gi + decay * *wi;
                        *mi = mu * *mi + gi;
                        let d = if nesterov { gi + mu * *mi } else { *mi };
                        *wi -= lr * d;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = &mut self.second[id.0];
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (b1, b2, eps) = (beta1 as f32, beta2 as f32, eps as f32);
                    let step = (lr * c2.sqrt() / c1) as f32;
                    for (((wi, &gi), mi), vi) in w.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let gi = gi + decay * *wi;
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                        *wi -= step * *mi / (vi.sqrt() + eps);
                    }
                }
            }
        }
    }
}
