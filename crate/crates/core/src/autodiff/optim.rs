use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are indexed like the store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig, store: &ParamStore<F>) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![F::zero(); p.value.len()]).collect();
        Self {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Number of steps taken so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Vec<F>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<F>] {
        &self.v
    }

    /// Restores optimizer state, e.g. from a checkpoint.
    pub fn restore(&mut self, t: u64, m: Vec<Vec<F>>, v: Vec<Vec<F>>) -> Result<()> {
        let ok = |x: &Vec<Vec<F>>| {
            x.len() == self.m.len() && x.iter().zip(&self.m).all(|(a, b)| a.len() == b.len())
        };
        if !ok(&m) || !ok(&v) {
            return Err(Error::shape("adam_restore", "moment shapes do not match parameters"));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update using the gradients currently held by `store`.
    pub fn step(&mut self, store: &mut ParamStore<F>) {
        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (F::of(1.0 / bc1), F::of(1.0 / bc2));
        let (lr, eps) = (F::of(c.lr), F::of(c.eps));
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data().to_vec();
            for (((w, g), mi), vi) in p.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * *g;
                *vi = b2 * *vi + one_b2 * *g * *g;
                let mhat = *mi * inv_bc1;
                let vhat = *vi * inv_bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[vals.len()], vals.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(&[1.0, -2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        for _ in 0..5 {
            adam.step(&mut s);
        }
        assert_eq!(s.value(crate::autodiff::ParamId(0)).data(), &[1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let cfg = AdamConfig::default();
        let mut s = store(&[0.0]);
        s.get_mut(crate::autodiff::ParamId(0)).grad.data_mut()[0] = 0.37;
        let mut adam = Adam::new(cfg, &s);
        // scalar simulation of the recurrences, independent of the tensor path
        let (mut m, mut v, mut w_ref) = (0.0f64, 0.0f64, 0.0f64);
        let mut last_update = 0.0;
        for t in 1..=100 {
            let before = s.value(crate::autodiff::ParamId(0)).data()[0];
            adam.step(&mut s);
            let after = s.value(crate::autodiff::ParamId(0)).data()[0];
            last_update = (after - before).abs();
            m = 0.9 * m + 0.1 * 0.37;
            v = 0.999 * v + 0.001 * 0.37 * 0.37;
            let mh = m / (1.0 - libm::pow(0.9, t as f64));
            let vh = v / (1.0 - libm::pow(0.999, t as f64));
            w_ref -= cfg.lr * mh / (libm::sqrt(vh) + cfg.eps);
        }
        assert!((last_update - cfg.lr).abs() / cfg.lr < 0.05);
        assert!((s.value(crate::autodiff::ParamId(0)).data()[0] - w_ref).abs() < 1e-12);
    }

    #[test]
    fn identical_state_identical_updates() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::new(&[2], vec![0.5, 0.5]).unwrap()).unwrap();
        let b = s.add("b", Tensor::new(&[2], vec![0.5, 0.5]).unwrap()).unwrap();
        s.get_mut(a).grad.data_mut().copy_from_slice(&[0.1, -0.2]);
        s.get_mut(b).grad.data_mut().copy_from_slice(&[0.1, -0.2]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s);
        adam.step(&mut s);
        assert_eq!(s.value(a), s.value(b));
    }
}
