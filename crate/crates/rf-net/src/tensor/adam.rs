//! Adam optimizer with bias correction.

use super::Tensor;
use crate::error::RfError;
use std::collections::HashMap;

/// Per-parameter-group optimizer state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn moment_arrays(&self, name: &str) -> Option<(&[f64], &[f64])> {
        match (self.m.get(name), self.v.get(name)) {
            (Some(m), Some(v)) => Some((m, v)),
            _ => None,
        }
    }

    pub fn set_moment_arrays(&mut self, name: &str, m: Vec<f64>, v: Vec<f64>) {
        self.m.insert(name.to_string(), m);
        self.v.insert(name.to_string(), v);
    }
}

/// One bias-corrected Adam update over named parameters. Gradients are read
/// from each tensor's accumulated grad (missing grads count as zero) and the
/// parameter values are updated in place.
pub fn adam_step(params: &[(String, Tensor)], state: &mut AdamState) -> Result<(), RfError> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, p) in params {
        let grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(RfError::NonFiniteGradient(name.clone()));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
        if m.len() != grad.len() {
            return Err(RfError::Shape(format!(
                "adam_step: state for '{name}' has {} entries, gradient has {}",
                m.len(),
                grad.len()
            )));
        }
        let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
        p.map_data(|data| {
            for i in 0..grad.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let p = Tensor::param(&[2], vec![1.0, -1.0]);
        p.accumulate_grad(&[0.3, -0.7]);
        let mut state = AdamState::new(0.05);
        adam_step(&[("w".into(), p.clone())], &mut state).unwrap();
        let d = p.to_vec();
        assert!((d[0] - (1.0 - 0.05)).abs() < 1e-3 * 0.05);
        assert!((d[1] - (-1.0 + 0.05)).abs() < 1e-3 * 0.05);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let p = Tensor::param(&[3], vec![1.0, 2.0, 3.0]);
        let mut state = AdamState::new(0.1);
        for _ in 0..5 {
            p.zero_grad();
            adam_step(&[("w".into(), p.clone())], &mut state).unwrap();
        }
        assert_eq!(p.to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn minimizes_quadratic() {
        let w = Tensor::param(&[1], vec![1.0]);
        let mut state = AdamState::new(0.1);
        for _ in 0..200 {
            w.zero_grad();
            let loss = ops::mul(&w, &w);
            loss.backward();
            adam_step(&[("w".into(), w.clone())], &mut state).unwrap();
        }
        assert!(w.item().abs() < 0.1, "w = {}", w.item());
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let p = Tensor::param(&[1], vec![0.0]);
        p.accumulate_grad(&[f64::NAN]);
        let mut state = AdamState::new(0.1);
        let err = adam_step(&[("det.block0.weight".into(), p)], &mut state).unwrap_err();
        assert!(err.to_string().contains("det.block0.weight"));
    }
}
