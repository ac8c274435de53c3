//! Bias-corrected Adam over one or more parameter stores.

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam hyperparameters other than the learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments for every leaf of the stores it was built for, in
/// store order then leaf order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<Tensor>>,
    pub v: Vec<Vec<Tensor>>,
}

impl AdamState {
    pub fn new(stores: &[&ParamStore]) -> Self {
        let zeros = |s: &ParamStore| s.leaves().iter().map(|l| Tensor::zeros(l.value.shape())).collect::<Vec<_>>();
        AdamState {
            t: 0,
            m: stores.iter().map(|s| zeros(s)).collect(),
            v: stores.iter().map(|s| zeros(s)).collect(),
        }
    }

    fn check(&self, stores: &[&mut ParamStore]) -> Result<()> {
        let mismatch = || Error::shape("adam_step", "optimizer state does not match the parameter stores");
        if stores.len() != self.m.len() {
            return Err(mismatch());
        }
        for ((store, m), v) in stores.iter().zip(&self.m).zip(&self.v) {
            if store.len() != m.len() || store.len() != v.len() {
                return Err(mismatch());
            }
            for ((leaf, mt), vt) in store.leaves().iter().zip(m).zip(v) {
                if leaf.value.shape() != mt.shape() || leaf.value.shape() != vt.shape() {
                    return Err(Error::shape("adam_step", format!("moment shape mismatch for {}", leaf.name)));
                }
            }
        }
        Ok(())
    }

    /// One in-place update of every leaf from its accumulated gradient;
    /// gradients are zeroed afterwards and `t` advances by one.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], lr: f64, hyper: AdamHyper) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {lr}")));
        }
        self.check(stores)?;
        self.t += 1;
        let AdamHyper { beta1, beta2, eps } = hyper;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((store, ms), vs) in stores.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for ((leaf, m), v) in store.leaves_mut().iter_mut().zip(ms).zip(vs) {
                let x = leaf.value.data_mut();
                for (((xi, gi), mi), vi) in x.iter_mut().zip(leaf.grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                    let g = *gi as f64;
                    let mn = beta1 * *mi as f64 + (1.0 - beta1) * g;
                    let vn = beta2 * *vi as f64 + (1.0 - beta2) * g * g;
                    *mi = mn as f32;
                    *vi = vn as f32;
                    let update = lr * (mn / bc1) / ((vn / bc2).sqrt() + eps);
                    if update != 0.0 {
                        *xi = (*xi as f64 - update) as f32;
                    }
                }
                leaf.grad.fill(0.0);
            }
        }
        Ok(())
    }
}
