use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Scalar;

/// Bias-corrected Adam over a list of parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lengths: &[usize], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: lengths.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: lengths.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }
}

/// One Adam update. Gradients are checked for finiteness before anything is
/// touched, so a failed step leaves parameters and state unchanged.
pub fn adam_step<T: Scalar>(params: &mut [&mut Vec<T>], grads: &[&Vec<T>], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::Shape(format!("adam: tensor {i} length mismatch")));
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("tensor {i}, element {j}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(state.beta1), T::of(state.beta2));
    let c1 = T::of(1.0 - state.beta1.powi(t));
    let c2 = T::of(1.0 - state.beta2.powi(t));
    let (lr, eps) = (T::of(state.lr), T::of(state.eps));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..p.len() {
            let gk = g[k];
            m[k] = b1 * m[k] + (T::one() - b1) * gk;
            v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            p[k] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(theta: &mut Vec<f64>, g: f64, state: &mut AdamState<f64>) {
        let grad = vec![g; theta.len()];
        adam_step(&mut [theta], &[&grad], state).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut th = vec![0.3, -1.0];
        let mut st = AdamState::new(&[2], 1e-3);
        run(&mut th, 0.0, &mut st);
        assert_eq!(th, vec![0.3, -1.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut th = vec![0.0];
        let mut st = AdamState::new(&[1], 1e-3);
        run(&mut th, 1.0, &mut st);
        // m_hat = 1, v_hat = 1: step = lr / (1 + eps)
        assert!((th[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_matches_moment_recursion() {
        let (lr, g) = (1e-3, 0.7);
        let mut th = vec![0.0];
        let mut st = AdamState::new(&[1], lr);
        let (mut m, mut v, mut prev_delta) = (0.0f64, 0.0f64, f64::INFINITY);
        for t in 1..=2 {
            let before = th[0];
            run(&mut th, g, &mut st);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            let expect = lr * mh / (vh.sqrt() + 1e-8);
            let delta = before - th[0];
            assert!((delta - expect).abs() < 1e-15);
            assert!(delta <= prev_delta + 1e-15);
            prev_delta = delta;
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut th = vec![1.0, 2.0];
        let mut st = AdamState::new(&[2], 1e-3);
        let g = vec![0.5, f64::NAN];
        assert!(matches!(adam_step(&mut [&mut th], &[&g], &mut st), Err(Error::NonFiniteGradient(_))));
        assert_eq!(th, vec![1.0, 2.0]);
        assert_eq!(st.step, 0);
    }
}
