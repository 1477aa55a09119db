//! AdamW with global-norm clipping, linear warmup, and an EMA shadow.

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::numerics::{Gradients, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied only to tensors of rank ≥ 2.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: u64,
}

/// Dense gradient list aligned with a store; missing entries are zero.
pub fn collect_grads<S: Real>(store: &ParamStore<S>, grads: &Gradients<S>) -> Vec<Tensor<S>> {
    store
        .ids()
        .map(|id| match grads.param(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(store.get(id).shape()),
        })
        .collect()
}

pub fn global_norm<S: Real>(grads: &[Tensor<S>]) -> S {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| *x * *x)
        .sum::<S>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<S: Real>(grads: &mut [Tensor<S>], max_norm: f64) -> S {
    let norm = global_norm(grads);
    let max = S::lit(max_norm);
    if norm > max {
        let c = max / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }
    norm
}

/// Linear warmup from `lr/warmup` to `lr`, constant afterwards.
pub fn warmup_lr(base: f64, warmup_steps: u64, step: u64) -> f64 {
    if warmup_steps == 0 {
        base
    } else {
        base * ((step + 1) as f64 / warmup_steps as f64).min(1.0)
    }
}

impl<S: Real> AdamW<S> {
    pub fn new(store: &ParamStore<S>, config: AdamWConfig) -> Self {
        let zeros: Vec<Tensor<S>> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Tensor<S>], lr: f64) {
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let bc1 = S::one() - b1.powi(self.t as i32);
        let bc2 = S::one() - b2.powi(self.t as i32);
        let lr = S::lit(lr);
        let eps = S::lit(c.eps);
        let wd = S::lit(c.weight_decay);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let decay = p.shape().len() >= 2 && wd > S::zero();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((w, g), mi), vi) in p.data_mut().iter_mut().zip(grads[k].data()).zip(m).zip(v) {
                *mi = b1 * *mi + (S::one() - b1) * *g;
                *vi = b2 * *vi + (S::one() - b2) * *g * *g;
                if decay {
                    *w -= lr * wd * *w;
                }
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Exponential moving average of a store's tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema<S> {
    pub decay: f64,
    pub shadow: Vec<Tensor<S>>,
}

impl<S: Real> Ema<S> {
    pub fn new(store: &ParamStore<S>, decay: f64) -> Self {
        Self {
            decay,
            shadow: store.tensors().to_vec(),
        }
    }

    /// Effective decay at `step`: ramps up as `(1+step)/(10+step)` so early
    /// averages are not dominated by the initialization.
    pub fn decay_at(&self, step: u64) -> f64 {
        self.decay.min((1 + step) as f64 / (10 + step) as f64)
    }

    pub fn update(&mut self, store: &ParamStore<S>, step: u64) {
        let d = S::lit(self.decay_at(step));
        for (s, w) in self.shadow.iter_mut().zip(store.tensors()) {
            for (a, b) in s.data_mut().iter_mut().zip(w.data()) {
                *a = d * *a + (S::one() - d) * *b;
            }
        }
    }

    /// Copy of `store` with the shadow values swapped in.
    pub fn apply(&self, store: &ParamStore<S>) -> ParamStore<S> {
        let mut out = store.clone();
        out.load(store.names(), self.shadow.clone()).expect("shadow mirrors store");
        out
    }
}
