use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay coefficient, applied as `p -= lr * wd * p`.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::config(format!("betas must lie in [0, 1), got {} {}", self.beta1, self.beta2)));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("eps must be positive and weight_decay non-negative"));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay over every parameter of a store.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    /// Updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the gradients held in `store`. Parameters without a
    /// gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2, eps, lr) = (T::of(c.beta1), T::of(c.beta2), T::of(c.eps), T::of(c.lr));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        let decay = T::one() - T::of(c.lr * c.weight_decay);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let p = store.get_mut(id);
            let Some(g) = p.grad.as_ref() else {
                log::warn!("adamw: `{}` has no gradient, skipped", p.name);
                continue;
            };
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let apply_decay = !p.decay_exempt && c.weight_decay != 0.0;
            let pv = p.value.data_mut();
            for (((w, &gi), mi), vi) in pv.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                if apply_decay {
                    *w *= decay;
                }
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    /// Moment buffers as `(<param>.m | <param>.v, tensor)` pairs; unset
    /// moments are written as zeros.
    pub fn state_tensors(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * store.len());
        for (i, p) in store.params().iter().enumerate() {
            let z = || Tensor::zeros(p.value.shape().to_vec());
            out.push((format!("{}.m", p.name), self.m[i].clone().unwrap_or_else(z)));
            out.push((format!("{}.v", p.name), self.v[i].clone().unwrap_or_else(z)));
        }
        out
    }

    pub fn load_state(&mut self, store: &ParamStore<T>, step: u64, entries: &[(String, Tensor<T>)]) -> Result<()> {
        let mut m = vec![None; store.len()];
        let mut v = vec![None; store.len()];
        for (name, t) in entries {
            let (base, slot) = match name.rsplit_once('.') {
                Some((b, "m")) => (b, &mut m),
                Some((b, "v")) => (b, &mut v),
                _ => return Err(Error::config(format!("optimizer entry `{name}` is not a moment"))),
            };
            let id = store
                .find(base)
                .ok_or_else(|| Error::config(format!("optimizer entry `{name}` has no parameter")))?;
            if store.value(id).shape() != t.shape() {
                return Err(Error::shape("load optimizer", format!("`{name}` is {:?}", t.shape())));
            }
            slot[id.index()] = Some(t.clone());
        }
        if m.iter().chain(&v).any(Option::is_none) {
            return Err(Error::config("optimizer state does not cover every parameter"));
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }
}
