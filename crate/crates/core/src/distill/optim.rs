use alloc::vec::Vec;

use crate::numerics::{Matrix, Real};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept in `f64`.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new<T: Real>(cfg: AdamWConfig, params: &[&Matrix<T>]) -> Self {
        Self {
            cfg,
            m: params.iter().map(|p| alloc::vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| alloc::vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of `params[i]` with `grads[i]`.
    pub fn step<T: Real>(&mut self, params: &mut [&mut Matrix<T>], grads: &[Matrix<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::State(alloc::format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - libm::pow(beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.t as f64);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.m[i].len() {
                return Err(Error::Shape(alloc::format!("parameter {i} does not match its gradient or state")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.as_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let update = (m[j] / bc1) / (libm::sqrt(v[j] / bc2) + eps);
                let mut x = w.as_f64();
                x -= lr * (update + weight_decay * x);
                *w = T::cast(x);
            }
        }
        Ok(())
    }
}

pub fn global_norm<T: Real>(grads: &[Matrix<T>]) -> f64 {
    libm::sqrt(
        grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum(),
    )
}

/// Rescales all gradients together so their joint norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Matrix<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = T::cast(v.as_f64() * s));
        }
    }
    norm
}
