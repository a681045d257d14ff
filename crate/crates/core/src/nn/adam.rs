use super::tensor::Tensor;
use crate::error::NnError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;
pub const DEFAULT_LR: f64 = 0.001;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One bias-corrected Adam update. Gradients are checked before any
/// parameter is touched, so an error leaves params and state unchanged.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    names: &[&str],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), NnError> {
    let n = params.len();
    if grads.len() != n || names.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(NnError::Shape(format!(
            "adam: {n} parameter blocks, {} gradients, {} moment blocks",
            grads.len(),
            state.m.len()
        )));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(NnError::Usage(format!("learning rate {lr} must be finite and non-negative")));
    }
    for k in 0..n {
        if params[k].shape() != grads[k].shape() || params[k].shape() != state.m[k].shape() {
            return Err(NnError::Shape(format!(
                "adam block {}: parameter {:?}, gradient {:?}",
                names[k],
                params[k].shape(),
                grads[k].shape()
            )));
        }
        if !grads[k].is_finite() {
            return Err(NnError::NonFinite(format!("gradient of {}", names[k])));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for k in 0..n {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, p) in params[k].data_mut().iter_mut().enumerate() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Tensor::from_vec(&[2], vec![1.5, -2.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[&g], &["w"], &mut st, DEFAULT_LR).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = scalar(0.0);
        let g = scalar(1.0);
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[&g], &["w"], &mut st, DEFAULT_LR).unwrap();
        let expected = -DEFAULT_LR / (1.0 + EPSILON);
        assert!((p.data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn minimizes_square() {
        let mut p = scalar(1.0);
        let mut st = AdamState::new(&[&p]);
        // the default rate moves θ by ~1e-3 per step; 200 steps need a larger one
        for _ in 0..200 {
            let g = scalar(2.0 * p.data()[0]);
            adam_step(&mut [&mut p], &[&g], &["theta"], &mut st, 0.05).unwrap();
        }
        assert!(p.data()[0].abs() < 0.05, "θ = {}", p.data()[0]);
    }

    #[test]
    fn zero_rate_is_identity() {
        let mut p = Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let g = Tensor::from_vec(&[3], vec![5.0, -1.0, 2.0]).unwrap();
        let mut st = AdamState::new(&[&p]);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[&g], &["w"], &mut st, 0.0).unwrap();
        }
        assert_eq!(p.data(), &[0.1, 0.2, 0.3]);
        assert!(st.v.iter().all(|v| v.data().iter().all(|x| *x >= 0.0)));
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut a = scalar(1.0);
        let mut b = scalar(1.0);
        let ga = scalar(0.5);
        let gb = scalar(f64::INFINITY);
        let mut st = AdamState::new(&[&a, &b]);
        let err = adam_step(&mut [&mut a, &mut b], &[&ga, &gb], &["a", "dense.bias"], &mut st, 0.1)
            .unwrap_err();
        assert!(err.to_string().contains("dense.bias"));
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(st.t, 0);
    }
}
