//! Adam with bias correction, plus global-norm gradient clipping.

use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one pair per parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState { step: 0, m: zeros(), v: zeros() }
    }
}

/// One Adam update. Checks every gradient before touching any parameter, so a
/// non-finite gradient leaves `params` and `state` unchanged.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TensorError::Contract(format!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.tensor(i).shape() {
            return Err(TensorError::Shape {
                op: "adam_step",
                lhs: params.tensor(i).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(TensorError::NonFiniteGradient { name: params.name(i).to_string() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2): (T, T) = (lit(cfg.beta1), lit(cfg.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let lr: T = lit(lr);
    let eps: T = lit(cfg.eps);
    for (i, g) in grads.iter().enumerate() {
        let p = params.tensor_mut(i).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (T::one() - b1) * gj;
            v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] = p[j] - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| {
            let x = x.to_f64().unwrap();
            x * x
        })
        .sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s: T = lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("x", Tensor::scalar(x));
        p
    }

    #[test]
    fn zero_gradient_leaves_params_and_advances_step() {
        let mut p = single(1.5);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(0.0)], &mut s, 0.1, AdamConfig::default()).unwrap();
        assert_eq!(p.tensor(0).item(), 1.5);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        for g in [3.0, -0.02, 1e3] {
            let mut p = single(0.0);
            let mut s = AdamState::new(&p);
            adam_step(&mut p, &[Tensor::scalar(g)], &mut s, 0.01, AdamConfig::default()).unwrap();
            let moved = p.tensor(0).item();
            assert!((moved + 0.01 * g.signum()).abs() < 1e-6, "g={g} moved={moved}");
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = single(1.0);
        let mut s = AdamState::new(&p);
        for _ in 0..500 {
            let x = p.tensor(0).item();
            adam_step(&mut p, &[Tensor::scalar(2.0 * x)], &mut s, 0.01, AdamConfig::default()).unwrap();
        }
        assert!(p.tensor(0).item().abs() < 1e-3, "x = {}", p.tensor(0).item());
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_aborts() {
        let mut p = single(1.0);
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut s, 0.1, AdamConfig::default()).unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient { name: "x".into() });
        assert_eq!(s.step, 0);
        assert_eq!(p.tensor(0).item(), 1.0);
    }

    #[test]
    fn clipping_rescales_to_cap() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0f64, 4.0]).unwrap()];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
    }
}
