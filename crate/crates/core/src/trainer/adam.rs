//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moment estimates per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update followed by decoupled decay:
/// `θ ← θ − lr·m̂/(√v̂ + eps) − lr·wd·θ`.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    learning_rate: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dim(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        let name = &params.names()[i];
        if g.len() != params.tensors()[i].len() || state.m[i].len() != g.len() {
            return Err(Error::dim(format!("gradient for {name} has the wrong size")));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (i, theta) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (p, &g)) in theta.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let old = *p;
            *p = old - learning_rate * (m_hat / (v_hat.sqrt() + EPS)) - learning_rate * weight_decay * old;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(values)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_only_decays() {
        let init = vec![1.0, -2.5, 0.125, 3.0e4];
        let mut p = store(init.clone());
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(vec![4])], &mut st, 1e-4, 1e-5).unwrap();
        for (after, before) in p.tensors()[0].data().iter().zip(&init) {
            let expected = before * (1.0 - 1e-9);
            assert!((after - expected).abs() <= 1e-15 * before.abs(), "{after} vs {expected}");
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = store(vec![0.5, 0.5]);
        let mut st = AdamState::new(&p);
        let g = Tensor::vector(vec![3.0, -0.02]);
        adam_step(&mut p, &[g], &mut st, 1e-3, 0.0).unwrap();
        let d = p.tensors()[0].data();
        assert!((d[0] - (0.5 - 1e-3)).abs() < 1e-9);
        assert!((d[1] - (0.5 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = store(vec![0.1, 0.2, 0.3]);
            let mut st = AdamState::new(&p);
            for k in 0..20 {
                let g = Tensor::vector(vec![(k as f64).sin(), 0.3, -(k as f64) * 0.01]);
                adam_step(&mut p, &[g], &mut st, 1e-2, 1e-5).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = store(vec![1.0]);
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &[Tensor::vector(vec![f64::NAN])], &mut st, 1e-3, 0.0)
            .unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains('w')),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p.tensors()[0].data(), &[1.0], "no partial update");
    }
}
