use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Adam optimizer state: first/second moment estimates per parameter plus
/// the shared step counter and hyperparameters.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One Adam update with bias correction. Parameters without a gradient
/// entry are left untouched.
pub fn adam_step<T: Scalar>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let (b1, b2) = (T::from_f64(state.beta1), T::from_f64(state.beta2));
    let (ib1, ib2) = (T::from_f64(1.0 - state.beta1), T::from_f64(1.0 - state.beta2));
    let lr = T::from_f64(state.lr / bc1);
    let bc2_sqrt = T::from_f64(1.0 / bc2.sqrt());
    let eps = T::from_f64(state.eps);

    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != p.shape() {
            return Err(Error::Dim(format!(
                "adam: gradient shape {:?} does not match parameter {name:?} shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        if m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::Dim(format!(
                "adam: moment shape does not match parameter {name:?}"
            )));
        }
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + ib1 * gv;
            *vv = b2 * *vv + ib2 * gv * gv;
            // lr already folds in the m-hat bias correction.
            *pv = *pv - lr * *mv / ((*vv).sqrt() * bc2_sqrt + eps);
        }
    }
    Ok(())
}
