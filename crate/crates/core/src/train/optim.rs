//! Adam with L2 weight decay on convolution kernels, and the step schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParameterStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply decay directly to the weights (AdamW) instead of adding
    /// `weight_decay · p` to the gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4, decoupled: false }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::invalid("Adam eps must be positive and weight_decay non-negative"));
        }
        Ok(())
    }
}

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T: Scalar> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    /// Completed update steps.
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        AdamState { step: 0, moments: BTreeMap::new() }
    }
}

impl<T: Scalar> AdamState<T> {
    /// Checks that every moment belongs to a learnable parameter of the
    /// same shape.
    pub fn check_against(&self, store: &ParameterStore<T>) -> Result<()> {
        for (name, mo) in &self.moments {
            let e = store.entry(name).map_err(|_| Error::UnknownParameter(name.clone()))?;
            if !e.kind.learnable() {
                return Err(Error::UnknownParameter(name.clone()));
            }
            for t in [&mo.m, &mo.v] {
                if t.shape() != e.value.shape() {
                    return Err(Error::ParameterShape { name: name.clone(), expected: e.value.shape(), found: t.shape() });
                }
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of every learnable parameter at rate `lr`.
/// `grads` must hold a gradient for each learnable parameter and nothing else.
pub fn adam_step<T: Scalar>(
    store: &mut ParameterStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    for name in grads.keys() {
        match store.entry(name) {
            Ok(e) if e.kind.learnable() => {}
            _ => return Err(Error::UnknownParameter(name.clone())),
        }
    }
    let t = state.step + 1;
    let c1 = T::lit(1.0 - cfg.beta1.powf(t as f64));
    let c2 = T::lit(1.0 - cfg.beta2.powf(t as f64));
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (ob1, ob2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let (eps, wd, lr_t) = (T::lit(cfg.eps), T::lit(cfg.weight_decay), T::lit(lr));
    for (name, entry) in store.iter_mut() {
        if !entry.kind.learnable() {
            continue;
        }
        let g = grads.get(name).ok_or_else(|| Error::invalid(format!("no gradient for parameter `{}`", name)))?;
        if g.shape() != entry.value.shape() {
            return Err(Error::ParameterShape { name: name.to_string(), expected: entry.value.shape(), found: g.shape() });
        }
        let shape = entry.value.shape();
        let mo = state
            .moments
            .entry(name.to_string())
            .or_insert_with(|| Moments { m: Tensor::zeros(shape), v: Tensor::zeros(shape) });
        let decays = entry.kind.decays() && cfg.weight_decay != 0.0;
        let (coupled, decoupled) = (decays && !cfg.decoupled, decays && cfg.decoupled);
        let p = entry.value.data_mut();
        let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
        for i in 0..p.len() {
            let gi = if coupled { g.data()[i] + wd * p[i] } else { g.data()[i] };
            m[i] = b1 * m[i] + ob1 * gi;
            v[i] = b2 * v[i] + ob2 * gi * gi;
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            if decoupled {
                p[i] -= lr_t * wd * p[i];
            }
            p[i] -= lr_t * update;
        }
    }
    state.step = t;
    Ok(())
}

/// `lr0 · factor^⌊epoch / step⌋`.
pub fn lr_at_epoch(epoch: usize, lr0: f64, step: usize, factor: f64) -> f64 {
    lr0 * factor.powi((epoch / step.max(1)) as i32)
}
