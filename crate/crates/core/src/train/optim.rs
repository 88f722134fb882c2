//! Adam with coupled (L2) weight decay and a step learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::{c, Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moments for each parameter, in parameter order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<T> {
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new() -> Self {
        OptimizerState {
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }
}

/// One Adam update over `params`; the weight-decay term `wd * theta` is added
/// to each gradient before the moment updates. Gradients are cleared
/// afterwards. A parameter without a gradient is treated as having a zero
/// gradient.
///
/// Nothing is modified if any gradient is non-finite.
pub fn adam_step<'a, T: Real>(
    params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    state: &mut OptimizerState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut params: Vec<(&str, &mut Tensor<T>)> = params.into_iter().collect();
    for (name, p) in &params {
        if let Some(g) = &p.grad {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|(_, p)| vec![T::zero(); p.len()]).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len()
        || state.first.iter().zip(&params).any(|(m, (_, p))| m.len() != p.len())
    {
        return Err(Error::Dimension("optimizer state does not match parameters".into()));
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = c::<T>(1.0 - BETA1.powi(t));
    let bc2 = c::<T>(1.0 - BETA2.powi(t));
    let (b1, b2) = (c::<T>(BETA1), c::<T>(BETA2));
    let (lr, wd, eps) = (c::<T>(lr), c::<T>(weight_decay), c::<T>(EPS));
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let grad = p.grad.take();
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            let g = grad.as_ref().map_or(T::zero(), |g| g[j]) + wd * *theta;
            m[j] = b1 * m[j] + (T::one() - b1) * g;
            v[j] = b2 * v[j] + (T::one() - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `base * factor^(floor(epoch / step_epochs))`.
pub fn step_lr(base: f64, epoch: usize, step_epochs: usize, factor: f64) -> f64 {
    if step_epochs == 0 {
        return base;
    }
    base * factor.powi((epoch / step_epochs) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor<f64> {
        Tensor::scalar(v).with_grad()
    }

    #[test]
    fn zero_grad_zero_decay_keeps_params() {
        let mut p = scalar_param(1.5);
        let mut st = OptimizerState::new();
        for _ in 0..3 {
            p.grad = Some(vec![0.0]);
            adam_step([("p", &mut p)], &mut st, 1e-3, 0.0).unwrap();
        }
        assert_eq!(p.data(), [1.5]);
    }

    #[test]
    fn matches_scalar_reference_trace() {
        let (lr, g) = (1e-2, 0.3);
        let mut p = scalar_param(1.0);
        let mut st = OptimizerState::new();
        // hand-rolled scalar Adam
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            p.grad = Some(vec![g]);
            adam_step([("p", &mut p)], &mut st, lr, 0.0).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((p.data()[0] - theta).abs() < 1e-10);
            assert!(p.grad.is_none());
        }
        // with constant gradient each bias-corrected step is ~lr
        assert!((1.0 - theta - 5.0 * lr).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_shrinks_magnitude() {
        for start in [2.0, -2.0] {
            let mut p = scalar_param(start);
            let mut st = OptimizerState::new();
            p.grad = Some(vec![0.0]);
            adam_step([("p", &mut p)], &mut st, 1e-3, 1e-4).unwrap();
            assert!(p.data()[0].abs() < start.abs());
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = scalar_param(1.0);
        let mut q = scalar_param(1.0);
        p.grad = Some(vec![0.1]);
        q.grad = Some(vec![f64::NAN]);
        let mut st = OptimizerState::new();
        let err = adam_step([("ok", &mut p), ("bad.weight", &mut q)], &mut st, 1e-3, 0.0).unwrap_err();
        assert!(err.to_string().contains("bad.weight"));
        assert_eq!(p.data(), [1.0]);
    }

    #[test]
    fn step_schedule() {
        assert_eq!(step_lr(1e-4, 0, 15, 0.1), 1e-4);
        assert_eq!(step_lr(1e-4, 14, 15, 0.1), 1e-4);
        assert!((step_lr(1e-4, 15, 15, 0.1) - 1e-5).abs() < 1e-20);
        assert!((step_lr(1e-4, 31, 15, 0.1) - 1e-6).abs() < 1e-20);
    }
}
