use super::{expect_eq, Result, Tensor};
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Per-parameter Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step<T: Scalar>(param: &mut Tensor<T>, grad: &[T], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    expect_eq("adam_step", "gradient length", param.numel(), grad.len())?;
    expect_eq("adam_step", "state length", param.numel(), state.m.len())?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2) = (T::from_f64_lossy(ADAM_BETA1), T::from_f64_lossy(ADAM_BETA2));
    let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - ADAM_BETA1), T::from_f64_lossy(1.0 - ADAM_BETA2));
    for (((p, &g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + one_b1 * g;
        *v = b2 * *v + one_b2 * g * g;
        let m_hat = m.as_f64() / bc1;
        let v_hat = v.as_f64() / bc2;
        *p -= T::from_f64_lossy(lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param_and_moments() {
        let mut p = Tensor::<f32>::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut st, 1e-3).unwrap();
        assert_eq!(p, before);
        assert!(st.m.iter().chain(&st.v).all(|&x| x == 0.0));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        for g in [1e-4, 0.3, 250.0, -7.0] {
            let mut p = Tensor::<f64>::from_vec(&[1], vec![0.0]).unwrap();
            let mut st = AdamState::new(1);
            adam_step(&mut p, &[g], &mut st, 1e-3).unwrap();
            let moved = p.data()[0];
            assert!((moved + 1e-3 * g.signum()).abs() < 1e-3 * 1e-3, "g={g} moved={moved}");
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let mut st = AdamState::new(2);
        assert!(adam_step(&mut p, &[1.0], &mut st, 0.1).is_err());
    }
}
