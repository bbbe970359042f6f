use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{Real, Tensor};

/// Adam moments and hyper-parameters.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
    /// Steps taken so far.
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> OptimState<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimState<T>,
) -> Result<()> {
    for (name, p) in params.iter() {
        match grads.get(name) {
            None => return Err(Error::MissingGrad(name.to_owned())),
            Some(g) if g.shape() != p.shape() => return Err(Error::shape("adam_step", p.shape(), g.shape())),
            Some(_) => {}
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::from_f64(state.beta1), T::from_f64(state.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - state.beta1), T::from_f64(1.0 - state.beta2));
    let corr1 = T::from_f64(1.0 - state.beta1.powi(t));
    let corr2 = T::from_f64(1.0 - state.beta2.powi(t));
    let lr = T::from_f64(state.lr);
    let eps = T::from_f64(state.eps);

    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state
            .m
            .entry(name.to_owned())
            .or_insert_with(|| vec![T::zero(); g.len()]);
        let v = state
            .v
            .entry(name.to_owned())
            .or_insert_with(|| vec![T::zero(); g.len()]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let m_hat = *mi / corr1;
            let v_hat = *vi / corr2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
