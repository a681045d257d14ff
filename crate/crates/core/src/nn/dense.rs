use rand::Rng;

use super::linalg::{gemm_nn, gemm_tn, transpose};
use super::tensor::Tensor;
use crate::error::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
}

/// Fully-connected layer, `y = act(W x + b)` with W of shape out × in.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weights: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let mut d = Self::zeros(input, output);
        let lim = (6.0 / (input + output) as f64).sqrt();
        for v in d.weights.data_mut() {
            *v = rng.random_range(-lim..lim);
        }
        d
    }

    pub fn input(&self) -> usize {
        self.weights.cols()
    }

    pub fn output(&self) -> usize {
        self.bias.len()
    }
}

pub fn dense_forward(h: &[f64], layer: &Dense, act: Activation) -> Result<Vec<f64>, NnError> {
    if h.len() != layer.input() {
        return Err(NnError::Shape(format!(
            "dense layer expects {} inputs, got {}",
            layer.input(),
            h.len()
        )));
    }
    if !h.iter().all(|v| v.is_finite()) {
        return Err(NnError::NonFinite("dense input".into()));
    }
    Ok(forward_batch(layer, h, 1, act))
}

/// B × in → B × out.
pub(crate) fn forward_batch(layer: &Dense, x: &[f64], batch: usize, act: Activation) -> Vec<f64> {
    let (n_in, n_out) = (layer.input(), layer.output());
    let mut y = Vec::with_capacity(batch * n_out);
    for _ in 0..batch {
        y.extend_from_slice(layer.bias.data());
    }
    gemm_nn(x, &transpose(layer.weights.data(), n_out, n_in), &mut y, batch, n_in, n_out);
    if act == Activation::Relu {
        for v in &mut y {
            *v = v.max(0.0);
        }
    }
    y
}

/// Given the layer input `x`, its post-activation output `y` and `dy`,
/// returns `(dW, db, dx)`.
pub(crate) fn backward_batch(
    layer: &Dense,
    x: &[f64],
    y: &[f64],
    dy: &[f64],
    batch: usize,
    act: Activation,
) -> (Tensor, Tensor, Vec<f64>) {
    let (n_in, n_out) = (layer.input(), layer.output());
    let dz: Vec<f64> = match act {
        Activation::Linear => dy.to_vec(),
        Activation::Relu => dy
            .iter()
            .zip(y)
            .map(|(g, out)| if *out > 0.0 { *g } else { 0.0 })
            .collect(),
    };
    let mut dw = Tensor::zeros(&[n_out, n_in]);
    gemm_tn(&dz, x, dw.data_mut(), batch, n_out, n_in);
    let mut db = Tensor::zeros(&[n_out]);
    for row in dz.chunks(n_out) {
        for (acc, v) in db.data_mut().iter_mut().zip(row) {
            *acc += v;
        }
    }
    let mut dx = vec![0.0; batch * n_in];
    gemm_nn(&dz, layer.weights.data(), &mut dx, batch, n_out, n_in);
    (dw, db, dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_then_activation() {
        let mut d = Dense::zeros(2, 2);
        d.weights.data_mut().copy_from_slice(&[1.0, 2.0, -1.0, -1.0]);
        d.bias.data_mut().copy_from_slice(&[0.5, 0.0]);
        assert_eq!(dense_forward(&[1.0, 1.0], &d, Activation::Linear).unwrap(), vec![3.5, -2.0]);
        assert_eq!(dense_forward(&[1.0, 1.0], &d, Activation::Relu).unwrap(), vec![3.5, 0.0]);
        assert!(matches!(dense_forward(&[1.0], &d, Activation::Relu), Err(NnError::Shape(_))));
    }

    #[test]
    fn linear_layer_gradient_is_least_squares_gradient() {
        // L = 1/N Σ ||W x + b − y||², dL/dW = 2/N Σ r xᵀ, dL/db = 2/N Σ r
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = Dense::init(3, 2, &mut rng);
        let n = 6;
        let x: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = forward_batch(&layer, &x, n, Activation::Linear);
        let dy: Vec<f64> = y.iter().zip(&t).map(|(a, b)| 2.0 * (a - b) / n as f64).collect();
        let (dw, db, _) = backward_batch(&layer, &x, &y, &dy, n, Activation::Linear);
        for o in 0..2 {
            let mut gb = 0.0;
            for s in 0..n {
                let pred: f64 = layer.bias.data()[o]
                    + (0..3).map(|i| layer.weights.data()[o * 3 + i] * x[s * 3 + i]).sum::<f64>();
                gb += 2.0 * (pred - t[s * 2 + o]) / n as f64;
            }
            assert!((db.data()[o] - gb).abs() < 1e-14);
            for i in 0..3 {
                let gw: f64 = (0..n)
                    .map(|s| {
                        let pred: f64 = layer.bias.data()[o]
                            + (0..3).map(|k| layer.weights.data()[o * 3 + k] * x[s * 3 + k]).sum::<f64>();
                        2.0 * (pred - t[s * 2 + o]) * x[s * 3 + i] / n as f64
                    })
                    .sum();
                assert!((dw.data()[o * 3 + i] - gw).abs() < 1e-14);
            }
        }
    }
}
