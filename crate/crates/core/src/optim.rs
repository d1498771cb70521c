//! AdamW with decoupled weight decay, global-norm clipping and learning
//! rate schedules.

use crate::tensor::{GradBuffer, Matrix, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// Linear warmup over `warmup` steps, then linear decay to 0 at `total`.
    LinearWarmupDecay { warmup: usize, total: usize },
}

impl Schedule {
    /// Multiplier of the base learning rate at 0-based `step`.
    pub fn factor(&self, step: usize) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::LinearWarmupDecay { warmup, total } => {
                let s = step as f64 + 1.0;
                if warmup > 0 && step < warmup {
                    s / warmup as f64
                } else if total > warmup {
                    ((total as f64 - step as f64) / (total - warmup) as f64).clamp(0.0, 1.0)
                } else {
                    1.0
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: Vec<u64>,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: vec![0; store.len()],
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    /// Updates every unfrozen parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, lr_factor: f64) {
        let lr = self.lr * lr_factor;
        for (id, g) in grads.iter() {
            if store.is_frozen(id) {
                continue;
            }
            let k = id.0;
            self.steps[k] += 1;
            let t = self.steps[k] as i32;
            let m = self.m[k].get_or_insert_with(|| Matrix::zeros(g.dim()));
            let v = self.v[k].get_or_insert_with(|| Matrix::zeros(g.dim()));
            let (b1, b2) = (self.beta1, self.beta2);
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let (eps, wd) = (self.eps, self.weight_decay);
            let p = store.get_mut(id);
            p.mapv_inplace(|x| x * (1.0 - lr * wd));
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}

/// Scales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping. A non-positive `max_norm` disables clipping.
pub fn clip_grad_norm(grads: &mut GradBuffer, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / (norm + 1e-12));
    }
    norm
}
