//! Adam with bias correction, operating on a parameter group of a store.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter group.
#[derive(Clone, Debug)]
pub struct Adam<F = f32> {
    pub config: AdamConfig,
    t: u64,
    params: Vec<ParamId>,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig, store: &ParamStore<F>, params: Vec<ParamId>) -> Self {
        let m: Vec<Vec<F>> = params
            .iter()
            .map(|&id| vec![F::zero(); store.value(id).numel()])
            .collect();
        let v = m.clone();
        Self {
            config,
            t: 0,
            params,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn moments(&self, i: usize) -> (&[F], &[F]) {
        (&self.m[i], &self.v[i])
    }

    /// Restores persisted state. Each moment must match its parameter's size.
    pub fn restore(&mut self, t: u64, m: Vec<Vec<F>>, v: Vec<Vec<F>>) -> Result<()> {
        if m.len() != self.params.len() || v.len() != self.params.len() {
            return Err(Error::Format(format!(
                "optimizer state has {} entries, expected {}",
                m.len(),
                self.params.len()
            )));
        }
        for (i, (mi, vi)) in m.iter().zip(&v).enumerate() {
            if mi.len() != self.m[i].len() || vi.len() != self.v[i].len() {
                return Err(Error::shape("adam restore", &[self.m[i].len()], &[mi.len(), vi.len()]));
            }
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update from the accumulated gradients in `store`. Parameters of
    /// the group without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
        let (bc1, bc2) = (F::of(bc1), F::of(bc2));
        let (lr, eps) = (F::of(c.lr), F::of(c.eps));

        for (i, &id) in self.params.iter().enumerate() {
            let Some(grad) = store.grad(id) else {
                continue;
            };
            if grad.numel() != self.m[i].len() {
                return Err(Error::shape("adam", &[self.m[i].len()], grad.shape()));
            }
            let grad = grad.data().to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.value_mut(id).data_mut();
            for j in 0..p.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales accumulated gradients of `params` so their joint L2 norm is at
/// most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(store: &mut ParamStore<F>, params: &[ParamId], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for &id in params {
        if let Some(g) = store.grad(id) {
            sq += g.data().iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::of(max_norm / norm);
        for &id in params {
            if let Some(g) = store.grad_mut(id) {
                for x in g.data_mut() {
                    *x *= s;
                }
            }
        }
    }
    norm
}
