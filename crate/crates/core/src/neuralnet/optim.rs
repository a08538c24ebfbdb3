use super::tensor::{Param, Scalar};
use super::train::TrainConfig;
use crate::error::{Error, Result};

/// First and second moment estimates of ADAM, one buffer per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new() -> Self {
        OptimState {
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }
}

/// One bias-corrected ADAM update of every parameter from its `grad`.
/// The state is sized on first use; later calls must pass the same
/// parameter list.
pub fn adam_step<T: Scalar>(params: &mut [&mut Param<T>], state: &mut OptimState<T>, cfg: &TrainConfig) -> Result<()> {
    if state.t == 0 && state.m.is_empty() {
        state.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() || params.iter().zip(&state.m).any(|(p, m)| p.len() != m.len()) {
        return Err(Error::Shape("optimizer state does not match the parameter list".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(cfg.adam_beta1), T::of(cfg.adam_beta2));
    let c1 = T::of(1.0 - cfg.adam_beta1.powi(t));
    let c2 = T::of(1.0 - cfg.adam_beta2.powi(t));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.adam_eps));
    let one = T::one();
    for ((p, m), v) in params.iter_mut().zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        for (((w, &g), mi), vi) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(name: &str, v: f64, g: f64) -> Param<f64> {
        let mut p = Param::trainable(name, vec![1], vec![v]);
        p.grad[0] = g;
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = TrainConfig::default();
        let mut p = scalar_param("w", 1.0, 0.1);
        let mut s = OptimState::new();
        adam_step(&mut [&mut p], &mut s, &cfg).unwrap();
        assert!((p.value[0] - (1.0 - 0.0002)).abs() < 1e-10);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let cfg = TrainConfig::default();
        let mut p = scalar_param("w", 0.7, 0.0);
        let mut s = OptimState::new();
        for _ in 0..5 {
            adam_step(&mut [&mut p], &mut s, &cfg).unwrap();
        }
        assert_eq!(p.value[0], 0.7);
        assert!(s.v[0][0] >= 0.0);
    }

    #[test]
    fn parameters_update_independently() {
        let cfg = TrainConfig::default();
        let mut a = scalar_param("a", 0.0, 0.5);
        let mut b = scalar_param("b", 0.0, 0.0);
        let mut s = OptimState::new();
        adam_step(&mut [&mut a, &mut b], &mut s, &cfg).unwrap();
        assert!(a.value[0] < 0.0);
        assert_eq!(b.value[0], 0.0);
        let mut c = scalar_param("c", 0.0, 0.0);
        assert!(adam_step(&mut [&mut c], &mut s, &cfg).is_err());
    }
}
