//! Bias-corrected Adam.

use super::tensor::{Real, Tensor};
use super::{ParamSet, TranslatorError};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros: Vec<_> = params.tensors().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<(), TranslatorError> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(TranslatorError::LearningRate(lr));
    }
    assert_eq!(params.len(), grads.len(), "gradient count mismatch");
    assert_eq!(params.len(), state.m.len(), "moment count mismatch");
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
    let c1 = T::lit(1.0 - BETA1.powf(t));
    let c2 = T::lit(1.0 - BETA2.powf(t));
    let (lr, eps) = (T::lit(lr), T::lit(EPS));
    let one = T::one();
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let mh = *mv / c1;
            let vh = *vv / c2;
            *pv = *pv - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParamSet<f64> {
        ParamSet::new(vec![("p".into(), Tensor::scalar(v))])
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_set(1.0);
        let g = scalar_set(1.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, 0.01).unwrap();
        let delta = p.tensors().next().unwrap().item() - 1.0;
        assert!((delta + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(s.step, 1);
        // Constant gradient keeps the bias-corrected ratio at 1.
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut s, 0.01).unwrap();
        }
        assert!((p.tensors().next().unwrap().item() - (1.0 - 0.06)).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut p = scalar_set(2.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &scalar_set(3.0), &mut s, 0.1).unwrap();
        let (m0, v0) = (s.m[0].item(), s.v[0].item());
        adam_step(&mut p, &scalar_set(0.0), &mut s, 0.1).unwrap();
        assert!(s.m[0].item() < m0 && s.v[0].item() < v0);

        let mut z = scalar_set(5.0);
        let mut sz = AdamState::new(&z);
        adam_step(&mut z, &scalar_set(0.0), &mut sz, 0.1).unwrap();
        assert_eq!(z, scalar_set(5.0));
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut p = scalar_set(1.0);
        let mut s = AdamState::new(&p);
        for lr in [0.0, -1e-3, f64::NAN] {
            assert!(adam_step(&mut p, &scalar_set(1.0), &mut s, lr).is_err());
        }
        assert_eq!(s.step, 0);
    }
}
