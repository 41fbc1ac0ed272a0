//! Adam with decoupled weight decay.

use crate::error::{Error, Result};

use super::{ParamStore, Real};

/// Optimizer hyper-parameters and moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step_count: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Real> AdamState<T> {
    /// Zeroed moments shaped like `params`; betas default to 0.9 / 0.999.
    pub fn new(params: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<T>> = params
            .tensors()
            .iter()
            .map(|t| vec![T::zero(); t.numel()])
            .collect();
        Self {
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One bias-corrected Adam step. Weight decay is applied to the parameters
/// (`θ ← θ − lr·wd·θ`) before the moment update.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
) -> Result<()> {
    if grads.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(Error::Dimension(format!(
            "adam_step: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.len() != params.tensor(i).numel() || state.first_moment[i].len() != g.len() {
            return Err(Error::Dimension(format!(
                "adam_step: gradient for {} has {} values, parameter has {}",
                params.name(i),
                g.len(),
                params.tensor(i).numel()
            )));
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {} is {} at element {j}",
                params.name(i),
                g[j]
            )));
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let lr = T::lit(state.lr);
    let b1 = T::lit(state.beta1);
    let b2 = T::lit(state.beta2);
    let eps = T::lit(state.eps);
    let decay = T::lit(state.lr * state.weight_decay);
    let bc1 = T::lit(1.0 - state.beta1.powi(t));
    let bc2 = T::lit(1.0 - state.beta2.powi(t));

    for (i, g) in grads.iter().enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        let theta = params.tensor_mut(i).data_mut();
        for j in 0..g.len() {
            if state.weight_decay != 0.0 {
                theta[j] = theta[j] - decay * theta[j];
            }
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            theta[j] = theta[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    fn single(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("theta", Tensor::new(vec![1], vec![v]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn first_step_is_minus_lr_times_sign() {
        let mut p = single(0.0);
        let mut st = AdamState::new(&p, 1e-3, 0.0);
        st.eps = 0.0;
        adam_step(&mut p, &[vec![1.0]], &mut st).unwrap();
        assert!((p.tensor(0).data()[0] + 1e-3).abs() < 1e-15);

        let mut p = single(0.0);
        let mut st = AdamState::new(&p, 1e-3, 0.0);
        st.eps = 0.0;
        adam_step(&mut p, &[vec![-7.5]], &mut st).unwrap();
        assert!((p.tensor(0).data()[0] - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = single(0.37);
        let mut st = AdamState::new(&p, 1e-3, 0.0);
        for _ in 0..10 {
            adam_step(&mut p, &[vec![0.0]], &mut st).unwrap();
        }
        assert_eq!(p.tensor(0).data()[0], 0.37);
        assert_eq!(st.step_count, 10);
    }

    #[test]
    fn quadratic_trajectory_matches_scalar_reference() {
        // Independent scalar Adam on f(θ) = θ², θ0 = 1, lr = 0.1.
        let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
        let mut theta = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut reference = Vec::new();
        for t in 1..=5 {
            let g = 2.0 * theta;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
            reference.push(theta);
        }

        let mut p = single(1.0);
        let mut st = AdamState::new(&p, lr, 0.0);
        for want in reference {
            let g = 2.0 * p.tensor(0).data()[0];
            adam_step(&mut p, &[vec![g]], &mut st).unwrap();
            assert!((p.tensor(0).data()[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn decoupled_decay_shrinks_parameters_with_zero_gradient() {
        let mut p = single(2.0);
        let mut st = AdamState::new(&p, 0.1, 0.5);
        adam_step(&mut p, &[vec![0.0]], &mut st).unwrap();
        assert!((p.tensor(0).data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = single(1.0);
        let mut st = AdamState::new(&p, 0.1, 0.0);
        let err = adam_step(&mut p, &[vec![f64::NAN]], &mut st).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("theta")));
        assert_eq!(st.step_count, 0);
    }
}
