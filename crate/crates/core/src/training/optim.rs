use pavescan_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// Heavy-ball SGD: `v ← μ·v + g`, `w ← w − lr·v` (first step `v = g`).
    Sgd,
    /// Adam with bias correction.
    Adam,
}

/// Per-parameter optimizer state. Weight decay applies to arrays of rank
/// ≥ 2 only (convolution and attention weights, not biases or norms).
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
    steps: usize,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            momentum,
            beta2: 0.999,
            weight_decay,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    /// Applies one update. `grads` holds one entry per store entry; `None`
    /// leaves the parameter untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        let n = store.len();
        self.first.resize(n, None);
        self.second.resize(n, None);
        self.steps += 1;
        let mu = T::of(self.momentum);
        let b2 = T::of(self.beta2);
        let lr_t = T::of(lr);
        let bias1 = 1.0 - self.momentum.powi(self.steps as i32);
        let bias2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            let Some(g) = grads.get(i).and_then(Option::as_ref) else { continue };
            if !entry.trainable {
                continue;
            }
            let decay = if entry.value.rank() >= 2 { T::of(self.weight_decay) } else { T::zero() };
            let w = entry.value.data_mut();
            let g: Vec<T> = g.data().iter().zip(w.iter()).map(|(&g, &w)| g + decay * w).collect();
            match self.kind {
                OptimizerKind::Sgd => {
                    let v = self.first[i].get_or_insert_with(|| Tensor::zeros([g.len()]));
                    let first_step = self.steps == 1;
                    for ((w, v), &g) in w.iter_mut().zip(v.data_mut()).zip(&g) {
                        *v = if first_step { g } else { mu * *v + g };
                        *w -= lr_t * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.first[i].get_or_insert_with(|| Tensor::zeros([g.len()]));
                    let v = self.second[i].get_or_insert_with(|| Tensor::zeros([g.len()]));
                    let (c1, c2) = (T::of(1.0 / bias1), T::of(1.0 / bias2));
                    let eps = T::of(1e-8);
                    for (((w, m), v), &g) in w.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(&g) {
                        *m = mu * *m + (T::one() - mu) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        *w -= lr_t * (*m * c1) / ((*v * c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Cosine decay from `lr0` at step 0 to `lr0·final_fraction` at `total`.
pub fn cosine_lr(lr0: f64, final_fraction: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr0;
    }
    let t = (step as f64 / (total - 1) as f64).min(1.0);
    let end = lr0 * final_fraction;
    end + (lr0 - end) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}
