//! Adam without weight decay.

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            first: vec![0.0; len],
            second: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != state.len() {
        return Err(Error::ShapeMismatch {
            expected: state.len(),
            actual: params.len(),
        });
    }
    if grads.len() != params.len() {
        return Err(Error::ShapeMismatch {
            expected: params.len(),
            actual: grads.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.5, -1.0, 2.0];
        let mut st = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut st, 0.1).unwrap();
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let g = [0.3, -4.0, 1e-3];
        let mut p = vec![0.0; 3];
        let mut st = AdamState::new(3);
        let lr = 0.01;
        adam_step(&mut p, &g, &mut st, lr).unwrap();
        // closed form: Δ = −lr·g/(|g| + ε)
        for (x, gi) in p.iter().zip(g) {
            let expected = -lr * gi / (gi.abs() + EPSILON);
            assert!((x - expected).abs() < 1e-15);
            assert!((x.abs() - lr).abs() < 1e-6 * lr / gi.abs().min(1.0));
        }
    }

    #[test]
    fn deterministic_and_shape_checked() {
        let mut a = vec![1.0, 2.0];
        let mut b = a.clone();
        let mut sa = AdamState::new(2);
        let mut sb = sa.clone();
        adam_step(&mut a, &[0.1, 0.2], &mut sa, 0.05).unwrap();
        adam_step(&mut b, &[0.1, 0.2], &mut sb, 0.05).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!(matches!(
            adam_step(&mut a, &[0.1], &mut sa, 0.05),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
