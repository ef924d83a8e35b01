//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore};
use crate::error::{GrnError, Result};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Matrix> = store.values().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn check(&self, store: &ParamStore, grads: &Gradients) -> Result<()> {
        let n = store.len();
        if self.m.len() != n || self.v.len() != n || grads.grads.len() != n {
            return Err(GrnError::InvalidArgument("optimizer state does not match the parameters".into()));
        }
        for ((p, g), m) in store.values().iter().zip(&grads.grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(GrnError::shape("adam", p.shape(), g.shape()));
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update. Weight decay shrinks each parameter by
/// `1 - lr·wd` before the moment-based step.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    state.check(store, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let shrink = 1.0 - state.lr * state.weight_decay;
    let (b1, b2) = (state.beta1, state.beta2);
    for (i, p) in store.values_mut().iter_mut().enumerate() {
        let g = grads.grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, x) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *x = *x * shrink - state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Matrix::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut store = one_param(0.7);
        let mut st = AdamState::new(&store, 0.1, 0.0);
        let g = Gradients {
            grads: vec![Matrix::scalar(0.0)],
        };
        for _ in 0..3 {
            adam_step(&mut store, &g, &mut st).unwrap();
        }
        assert_eq!(store.values()[0].get(0, 0), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = one_param(0.0);
        let mut st = AdamState::new(&store, 0.1, 0.0);
        let g = Gradients {
            grads: vec![Matrix::scalar(1.0)],
        };
        adam_step(&mut store, &g, &mut st).unwrap();
        assert!((store.values()[0].get(0, 0) + 0.1).abs() < 1e-8);
    }

    #[test]
    fn decay_is_multiplicative() {
        let mut store = one_param(2.0);
        let mut st = AdamState::new(&store, 0.1, 0.5);
        let g = Gradients {
            grads: vec![Matrix::scalar(0.0)],
        };
        adam_step(&mut store, &g, &mut st).unwrap();
        assert!((store.values()[0].get(0, 0) - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn mismatched_gradients_rejected() {
        let mut store = one_param(0.0);
        let mut st = AdamState::new(&store, 0.1, 0.0);
        let g = Gradients { grads: vec![] };
        assert!(adam_step(&mut store, &g, &mut st).is_err());
    }
}
