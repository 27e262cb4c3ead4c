//! Adam with bias correction over a named parameter set.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_LR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Element = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
}

/// Zero moments for every parameter; β1 = 0.9, β2 = 0.999, ε = 1e-8.
pub fn adam_init<T: Element>(params: &IndexMap<String, Tensor<T>>, lr: f64) -> Result<AdamState<T>> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
    }
    let zeros: IndexMap<String, Tensor<T>> = params
        .iter()
        .map(|(k, p)| (k.clone(), Tensor::zeros_unchecked(p.dims())))
        .collect();
    Ok(AdamState {
        lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        t: 0,
        m: zeros.clone(),
        v: zeros,
    })
}

/// One Adam update of `params` in place. Parameters without an entry in `grads`
/// are left untouched (their moments still decay). Non-finite gradients are
/// rejected before anything is modified.
pub fn adam_step<T: Element>(
    params: &mut IndexMap<String, Tensor<T>>,
    grads: &IndexMap<String, Tensor<T>>,
    s: &mut AdamState<T>,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
        if p.dims() != g.dims() {
            return Err(Error::shape(
                "adam_step",
                format!("{name}: parameter {:?}, gradient {:?}", p.dims(), g.dims()),
            ));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite("adam_step gradients"));
        }
    }
    if params.keys().ne(s.m.keys()) {
        return Err(Error::InvalidArgument(
            "optimizer state does not match parameter set".into(),
        ));
    }

    s.t += 1;
    let t = i32::try_from(s.t).unwrap_or(i32::MAX);
    let (b1, b2) = (T::of(s.beta1), T::of(s.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - s.beta1), T::of(1.0 - s.beta2));
    let bc1 = T::of(1.0 - s.beta1.powi(t));
    let bc2 = T::of(1.0 - s.beta2.powi(t));
    let (lr, eps) = (T::of(s.lr), T::of(s.eps));

    for (name, p) in params.iter_mut() {
        let m = s.m.get_mut(name).expect("keys checked");
        let v = s.v.get_mut(name).expect("keys checked");
        let Some(g) = grads.get(name) else {
            m.data_mut().iter_mut().for_each(|x| *x *= b1);
            v.data_mut().iter_mut().for_each(|x| *x *= b2);
            continue;
        };
        for (((theta, mi), vi), &gi) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
