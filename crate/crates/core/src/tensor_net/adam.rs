use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Bias-corrected adaptive-moment optimizer state over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            step: 0,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            lr,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// lr = 0.001, β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn with_defaults(num_params: usize) -> Self {
        Self::new(num_params, 1e-3, 0.9, 0.999, 1e-8)
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.first_moment.len()
        || params.len() != state.second_moment.len()
    {
        return Err(invalid(format!(
            "adam shapes disagree: {} params, {} grads, {}/{} moments",
            params.len(),
            grads.len(),
            state.first_moment.len(),
            state.second_moment.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = if c1 > 0.0 { *m / c1 } else { *m };
        let v_hat = if c2 > 0.0 { *v / c2 } else { *v };
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut s = AdamState::with_defaults(3);
        adam_step(&mut p, &[0.0; 3], &mut s).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        let mut p = vec![1.0];
        let mut s = AdamState::with_defaults(1);
        adam_step(&mut p, &[1.0], &mut s).unwrap();
        let expected = 1.0 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - 0.999).abs() < 1e-6);
    }

    #[test]
    fn quadratic_loss_decreases() {
        let loss = |w: f64| (w - 3.0) * (w - 3.0);
        let mut p = vec![0.0];
        let mut s = AdamState::new(1, 0.1, 0.9, 0.999, 1e-8);
        let mut prev = loss(p[0]);
        for _ in 0..2 {
            let g = 2.0 * (p[0] - 3.0);
            adam_step(&mut p, &[g], &mut s).unwrap();
            let l = loss(p[0]);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn degenerates_to_scaled_gradient_descent() {
        let eps = 1e12;
        let lr = 0.5;
        let grads = [0.3, -1.7, 4.0];
        let mut p = vec![1.0, 2.0, 3.0];
        let mut s = AdamState::new(3, lr, 0.0, 0.0, eps);
        adam_step(&mut p, &grads, &mut s).unwrap();
        for (i, g) in grads.iter().enumerate() {
            let sgd = [1.0, 2.0, 3.0][i] - lr / eps * g;
            assert!((p[i] - sgd).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut s = AdamState::with_defaults(2);
        assert!(adam_step(&mut [0.0; 3], &[0.0; 3], &mut s).is_err());
    }
}
