use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffgraph::Tensor;

/// Scales `grads` so their joint l2 norm is at most `max_norm` (no-op when
/// `max_norm <= 0`). Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}

/// SGD with heavy-ball momentum and L2 weight decay. Parameters without a
/// gradient are left untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, shapes: &[Tensor]) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: shapes.iter().map(|t| Array2::zeros(t.dim())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>]) {
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            let d = g + &(&**p * self.weight_decay);
            *v = &*v * self.momentum + &d;
            **p -= &(&*v * self.lr);
        }
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, shapes: &[Tensor]) -> Self {
        Self {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: shapes.iter().map(|t| Array2::zeros(t.dim())).collect(),
            v: shapes.iter().map(|t| Array2::zeros(t.dim())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let d = g + &(&**p * self.weight_decay);
            self.m[k] = &self.m[k] * self.beta1 + &(&d * (1.0 - self.beta1));
            self.v[k] = &self.v[k] * self.beta2 + &(d.mapv(|x| x * x) * (1.0 - self.beta2));
            let step = ndarray::Zip::from(&self.m[k])
                .and(&self.v[k])
                .map_collect(|m, v| (m / bc1) / ((v / bc2).sqrt() + self.eps));
            **p -= &(step * self.lr);
        }
    }
}
