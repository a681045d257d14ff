//! LSTM layer with gate order (input, forget, cell candidate, output).
//!
//! Weight rows are grouped by gate: rows `0..H` feed the input gate,
//! `H..2H` the forget gate, `2H..3H` the candidate and `3H..4H` the output
//! gate.
//!
//! ```text
//! i, f, o = σ(W x + U h + b)   g = tanh(W x + U h + b)
//! c' = f ⊙ c + i ⊙ g           h' = o ⊙ tanh(c')
//! ```

use rand::Rng;

use super::linalg::{gemm_nn, gemm_nt, gemm_tn, sigmoid, sigmoid_slice, tanh, tanh_slice, transpose};
use super::tensor::Tensor;
use crate::error::NnError;

/// Tag written into weight snapshots.
pub const GATE_ORDER: &str = "ifgo";

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// 4H × D
    pub input_weights: Tensor,
    /// 4H × H
    pub recurrent_weights: Tensor,
    /// 4H
    pub bias: Tensor,
}

impl LstmParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            input_weights: Tensor::zeros(&[4 * hidden, input]),
            recurrent_weights: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    /// Glorot-uniform weights, zero biases except the forget gate at 1.
    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input, hidden);
        let lim_w = (6.0 / (input + 4 * hidden) as f64).sqrt();
        let lim_u = (6.0 / (hidden + 4 * hidden) as f64).sqrt();
        for v in p.input_weights.data_mut() {
            *v = rng.random_range(-lim_w..lim_w);
        }
        for v in p.recurrent_weights.data_mut() {
            *v = rng.random_range(-lim_u..lim_u);
        }
        p.bias.data_mut()[hidden..2 * hidden].fill(1.0);
        p
    }

    pub fn hidden(&self) -> usize {
        self.recurrent_weights.cols()
    }

    pub fn input(&self) -> usize {
        self.input_weights.cols()
    }

    pub fn param_count(&self) -> usize {
        self.input_weights.len() + self.recurrent_weights.len() + self.bias.len()
    }
}

fn check_finite(name: &str, v: &[f64]) -> Result<(), NnError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(NnError::NonFinite(name.to_string()))
    }
}

/// One time step for a single sample. Returns `(h_t, c_t)`.
pub fn lstm_cell_forward(
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    p: &LstmParams,
) -> Result<(Vec<f64>, Vec<f64>), NnError> {
    let (d, h) = (p.input(), p.hidden());
    if x.len() != d || h_prev.len() != h || c_prev.len() != h {
        return Err(NnError::Shape(format!(
            "cell expects x[{d}], h[{h}], c[{h}]; got x[{}], h[{}], c[{}]",
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    check_finite("cell input", x)?;
    check_finite("cell state", h_prev)?;
    check_finite("cell state", c_prev)?;
    let mut z = p.bias.data().to_vec();
    gemm_nt(x, p.input_weights.data(), &mut z, 1, d, 4 * h);
    gemm_nt(h_prev, p.recurrent_weights.data(), &mut z, 1, h, 4 * h);
    let mut c = vec![0.0; h];
    let mut out = vec![0.0; h];
    for k in 0..h {
        let i = sigmoid(z[k]);
        let f = sigmoid(z[h + k]);
        let g = tanh(z[2 * h + k]);
        let o = sigmoid(z[3 * h + k]);
        c[k] = f * c_prev[k] + i * g;
        out[k] = o * tanh(c[k]);
    }
    Ok((out, c))
}

/// Unrolled forward pass over one sequence (`T × D`, row-major) from zero
/// initial state. Returns the `T × H` hidden sequence.
pub fn lstm_layer_forward(x: &[f64], steps: usize, p: &LstmParams) -> Result<Vec<f64>, NnError> {
    let (d, h) = (p.input(), p.hidden());
    if x.len() != steps * d {
        return Err(NnError::Shape(format!(
            "sequence has {} values, expected {steps}×{d}",
            x.len()
        )));
    }
    let mut hs = Vec::with_capacity(steps * h);
    let mut state = (vec![0.0; h], vec![0.0; h]);
    for t in 0..steps {
        state = lstm_cell_forward(&x[t * d..(t + 1) * d], &state.0, &state.1, p)?;
        hs.extend_from_slice(&state.0);
    }
    Ok(hs)
}

/// Activations kept from a batched forward pass, indexed by time step.
#[derive(Debug, Clone, Default)]
pub(crate) struct LstmCache {
    /// Inputs per step, B × D.
    pub xs: Vec<Vec<f64>>,
    /// Activated gates per step, B × 4H.
    pub gates: Vec<Vec<f64>>,
    /// Cell states per step, B × H.
    pub cs: Vec<Vec<f64>>,
    /// tanh(c) per step, B × H.
    pub tanh_cs: Vec<Vec<f64>>,
    /// Hidden outputs per step, B × H.
    pub hs: Vec<Vec<f64>>,
}

/// Gradients for one layer, same shapes as [`LstmParams`].
#[derive(Debug, Clone)]
pub(crate) struct LstmGrads {
    pub input_weights: Tensor,
    pub recurrent_weights: Tensor,
    pub bias: Tensor,
}

/// Batched forward over `xs` (one B × D matrix per step).
pub(crate) fn forward_batch(p: &LstmParams, xs: Vec<Vec<f64>>, batch: usize) -> LstmCache {
    let (d, h) = (p.input(), p.hidden());
    let g4 = 4 * h;
    let steps = xs.len();
    let mut cache = LstmCache {
        gates: Vec::with_capacity(steps),
        cs: Vec::with_capacity(steps),
        tanh_cs: Vec::with_capacity(steps),
        hs: Vec::with_capacity(steps),
        xs: Vec::new(),
    };
    let zero = vec![0.0; batch * h];
    let wt = transpose(p.input_weights.data(), g4, d);
    let ut = transpose(p.recurrent_weights.data(), g4, h);
    // input contributions for all steps in one product
    let x_all: Vec<f64> = xs.concat();
    let mut zx = Vec::with_capacity(steps * batch * g4);
    for _ in 0..steps * batch {
        zx.extend_from_slice(p.bias.data());
    }
    gemm_nn(&x_all, &wt, &mut zx, steps * batch, d, g4);
    for zt in zx.chunks(batch * g4) {
        let h_prev = cache.hs.last().unwrap_or(&zero);
        let c_prev = cache.cs.last().unwrap_or(&zero);
        let mut z = zt.to_vec();
        gemm_nn(h_prev, &ut, &mut z, batch, h, g4);
        let mut c = vec![0.0; batch * h];
        let mut tc = vec![0.0; batch * h];
        let mut hn = vec![0.0; batch * h];
        for b in 0..batch {
            let zb = &mut z[b * g4..(b + 1) * g4];
            sigmoid_slice(&mut zb[..2 * h]);
            tanh_slice(&mut zb[2 * h..3 * h]);
            sigmoid_slice(&mut zb[3 * h..]);
            for k in 0..h {
                let idx = b * h + k;
                c[idx] = zb[h + k] * c_prev[idx] + zb[k] * zb[2 * h + k];
            }
        }
        tc.copy_from_slice(&c);
        tanh_slice(&mut tc);
        for b in 0..batch {
            let zo = &z[b * g4 + 3 * h..(b + 1) * g4];
            for k in 0..h {
                hn[b * h + k] = zo[k] * tc[b * h + k];
            }
        }
        cache.gates.push(z);
        cache.cs.push(c);
        cache.tanh_cs.push(tc);
        cache.hs.push(hn);
    }
    cache.xs = xs;
    cache
}

/// Backpropagation through time. `dhs[t]` is the loss gradient flowing into
/// the hidden output at step `t` from above (B × H). Returns parameter
/// gradients and the gradient with respect to each step's input (B × D).
pub(crate) fn backward_batch(
    p: &LstmParams,
    cache: &LstmCache,
    dhs: &[Vec<f64>],
    batch: usize,
    need_input_grad: bool,
) -> (LstmGrads, Vec<Vec<f64>>) {
    let (d, h) = (p.input(), p.hidden());
    let g4 = 4 * h;
    let steps = cache.hs.len();
    let mut grads = LstmGrads {
        input_weights: Tensor::zeros(&[g4, d]),
        recurrent_weights: Tensor::zeros(&[g4, h]),
        bias: Tensor::zeros(&[g4]),
    };
    let mut dxs = vec![Vec::new(); steps];
    let mut dh_next = vec![0.0; batch * h];
    let mut dc_next = vec![0.0; batch * h];
    let zero = vec![0.0; batch * h];
    let mut dz_all = vec![0.0; steps * batch * g4];
    for t in (0..steps).rev() {
        let gates = &cache.gates[t];
        let tc = &cache.tanh_cs[t];
        let c_prev = if t > 0 { &cache.cs[t - 1] } else { &zero };
        let dz = &mut dz_all[t * batch * g4..(t + 1) * batch * g4];
        for b in 0..batch {
            let gb = &gates[b * g4..(b + 1) * g4];
            let dzb = &mut dz[b * g4..(b + 1) * g4];
            for k in 0..h {
                let idx = b * h + k;
                let (i, f, g, o) = (gb[k], gb[h + k], gb[2 * h + k], gb[3 * h + k]);
                let dh = dhs[t][idx] + dh_next[idx];
                let d_o = dh * tc[idx];
                let dc = dc_next[idx] + dh * o * (1.0 - tc[idx] * tc[idx]);
                dzb[k] = dc * g * i * (1.0 - i);
                dzb[h + k] = dc * c_prev[idx] * f * (1.0 - f);
                dzb[2 * h + k] = dc * i * (1.0 - g * g);
                dzb[3 * h + k] = d_o * o * (1.0 - o);
                dc_next[idx] = dc * f;
            }
        }
        dh_next.fill(0.0);
        if t > 0 {
            gemm_nn(dz, p.recurrent_weights.data(), &mut dh_next, batch, g4, h);
        }
    }
    // weight gradients summed over all steps at once
    let rows = steps * batch;
    let x_all = cache.xs.concat();
    let mut h_prev_all = zero.clone();
    for hs in &cache.hs[..steps.saturating_sub(1)] {
        h_prev_all.extend_from_slice(hs);
    }
    let dz_t = transpose(&dz_all, rows, g4);
    gemm_nn(&dz_t, &h_prev_all, grads.recurrent_weights.data_mut(), g4, rows, h);
    if d >= h {
        gemm_nn(&dz_t, &x_all, grads.input_weights.data_mut(), g4, rows, d);
    } else {
        gemm_tn(&dz_all, &x_all, grads.input_weights.data_mut(), rows, g4, d);
    }
    let db = grads.bias.data_mut();
    for row in dz_all.chunks(g4) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    if need_input_grad {
        let mut dx_all = vec![0.0; rows * d];
        gemm_nn(&dz_all, p.input_weights.data(), &mut dx_all, rows, g4, d);
        for (slot, chunk) in dxs.iter_mut().zip(dx_all.chunks(batch * d)) {
            *slot = chunk.to_vec();
        }
    }
    (grads, dxs)
}
