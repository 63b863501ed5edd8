use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Grads, Matrix, NumericsError, ParamStore, Result};

/// `p ← p − lr·g` for every parameter in `store`.
///
/// Every parameter must have a gradient and every gradient must name a
/// parameter.
pub fn sgd_step(store: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
    check_keys(store, grads)?;
    for (name, g) in grads {
        store.get_mut(name)?.axpy(-lr, g)?;
    }
    Ok(())
}

fn check_keys(store: &ParamStore, grads: &Grads) -> Result<()> {
    if let Some(missing) = store.names().find(|n| !grads.contains_key(*n)) {
        return Err(NumericsError::MissingGradient(missing.to_string()));
    }
    if let Some(extra) = grads.keys().find(|k| !store.contains(k)) {
        return Err(NumericsError::UnknownParameter(extra.clone()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Matrix>,
    pub v: BTreeMap<String, Matrix>,
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState { step: 0, m: BTreeMap::new(), v: BTreeMap::new() },
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<()> {
        check_keys(store, grads)?;
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            let m = self.state.m.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.state.v.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mh = *mv / c1;
                let vh = *vv / c2;
                *pv -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
