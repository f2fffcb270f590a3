use serde::{Deserialize, Serialize};

use crate::encoders::ParameterStore;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, one buffer per store tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn check(&self, store: &ParameterStore) -> Result<()> {
        let ok = self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.len() == p.numel() && v.len() == p.numel());
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(
                "Adam moments do not match the parameter store".into(),
            ))
        }
    }
}

/// One bias-corrected Adam update using the gradients in the store's slots.
/// `step` counts from 1. A non-finite gradient aborts before any tensor is
/// modified.
pub fn adam_step(
    store: &mut ParameterStore,
    state: &mut AdamState,
    step: u64,
    lr: f64,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Config("Adam step counter starts at 1".into()));
    }
    state.check(store)?;
    for p in store.iter() {
        if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of `{}` at index {i} is {}",
                p.name, p.grad[i]
            )));
        }
    }
    let bc1 = 1.0 - BETA1.powi(step as i32);
    let bc2 = 1.0 - BETA2.powi(step as i32);
    for (p, (m, v)) in store
        .iter_mut()
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, g), m), v) in p
            .value
            .iter_mut()
            .zip(&p.grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    store.bump_version();
    Ok(())
}
