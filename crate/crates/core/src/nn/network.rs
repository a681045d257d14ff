//! LSTM stack → (concat statics) → dense(ReLU) → linear head.

use rand::Rng;

use super::adam::{adam_step, AdamState};
use super::dense::{self, Activation, Dense};
use super::lstm::{self, LstmCache, LstmParams, GATE_ORDER};
use super::tensor::Tensor;
use crate::codec::{Decoder, Encoder};
use crate::error::NnError;

const MAGIC: &[u8; 8] = b"CCNNET\0\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub lstm_units: Vec<usize>,
    pub dense_units: usize,
    pub output_dim: usize,
    /// Width of the per-sample static vector joined to the last hidden
    /// state; 0 disables it.
    pub static_dim: usize,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0
            || self.lstm_units.is_empty()
            || self.lstm_units.contains(&0)
            || self.dense_units == 0
            || self.output_dim == 0
        {
            return Err(NnError::Shape(format!("invalid network spec {self:?}")));
        }
        Ok(())
    }

    pub fn dense_input(&self) -> usize {
        self.lstm_units.last().copied().unwrap_or(0) + self.static_dim
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let mut d = self.input_dim;
        let mut n = 0;
        for &h in &self.lstm_units {
            n += 4 * h * (d + h + 1);
            d = h;
        }
        n + self.dense_units * (self.dense_input() + 1) + self.output_dim * (self.dense_units + 1)
    }
}

/// A batch of equal-length sequences, stored sample-major: `data[b][t][d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub batch: usize,
    pub steps: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    /// `batch × static_dim` when the network takes statics.
    pub statics: Option<Vec<f64>>,
}

impl SequenceBatch {
    pub fn new(batch: usize, steps: usize, dim: usize, data: Vec<f64>) -> Result<Self, NnError> {
        if data.len() != batch * steps * dim {
            return Err(NnError::Shape(format!(
                "batch {batch}×{steps}×{dim} needs {} values, got {}",
                batch * steps * dim,
                data.len()
            )));
        }
        Ok(Self { batch, steps, dim, data, statics: None })
    }

    pub fn with_statics(mut self, statics: Vec<f64>) -> Self {
        self.statics = Some(statics);
        self
    }

    /// Time-major view: one B × D matrix per step.
    fn by_step(&self) -> Vec<Vec<f64>> {
        (0..self.steps)
            .map(|t| {
                let mut m = Vec::with_capacity(self.batch * self.dim);
                for b in 0..self.batch {
                    let off = (b * self.steps + t) * self.dim;
                    m.extend_from_slice(&self.data[off..off + self.dim]);
                }
                m
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub lstm: Vec<LstmParams>,
    pub dense: Dense,
    pub head: Dense,
}

/// Record of one forward pass, consumed by [`Network::backward`].
#[derive(Debug)]
pub struct Tape {
    batch: usize,
    lstm: Vec<LstmCache>,
    dense_in: Vec<f64>,
    dense_out: Vec<f64>,
    consumed: bool,
}

/// Gradients aligned with [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<Tensor>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(Tensor::is_finite)
    }
}

impl Network {
    pub fn new<R: Rng>(spec: NetworkSpec, rng: &mut R) -> Result<Self, NnError> {
        spec.validate()?;
        let mut d = spec.input_dim;
        let mut layers = Vec::with_capacity(spec.lstm_units.len());
        for &h in &spec.lstm_units {
            layers.push(LstmParams::init(d, h, rng));
            d = h;
        }
        let dense = Dense::init(spec.dense_input(), spec.dense_units, rng);
        let head = Dense::init(spec.dense_units, spec.output_dim, rng);
        Ok(Self { spec, lstm: layers, dense, head })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for l in &self.lstm {
            v.extend([&l.input_weights, &l.recurrent_weights, &l.bias]);
        }
        v.extend([&self.dense.weights, &self.dense.bias, &self.head.weights, &self.head.bias]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for l in &mut self.lstm {
            v.extend([&mut l.input_weights, &mut l.recurrent_weights, &mut l.bias]);
        }
        v.extend([
            &mut self.dense.weights,
            &mut self.dense.bias,
            &mut self.head.weights,
            &mut self.head.bias,
        ]);
        v
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for i in 0..self.lstm.len() {
            for part in ["input_weights", "recurrent_weights", "bias"] {
                v.push(format!("lstm{i}.{part}"));
            }
        }
        for part in ["dense.weights", "dense.bias", "head.weights", "head.bias"] {
            v.push(part.to_string());
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn check_batch(&self, x: &SequenceBatch) -> Result<(), NnError> {
        if x.dim != self.spec.input_dim {
            return Err(NnError::Shape(format!(
                "network expects {} channels, batch has {}",
                self.spec.input_dim, x.dim
            )));
        }
        if x.batch == 0 || x.steps == 0 || x.data.len() != x.batch * x.steps * x.dim {
            return Err(NnError::Shape(format!(
                "malformed batch {}×{}×{} with {} values",
                x.batch,
                x.steps,
                x.dim,
                x.data.len()
            )));
        }
        let s = self.spec.static_dim;
        match (&x.statics, s) {
            (None, 0) => {}
            (Some(v), s) if s > 0 && v.len() == x.batch * s => {}
            _ => {
                return Err(NnError::Shape(format!(
                    "network expects {s} static values per sample, batch has {:?}",
                    x.statics.as_ref().map(|v| v.len())
                )))
            }
        }
        if !x.data.iter().all(|v| v.is_finite())
            || !x.statics.iter().flatten().all(|v| v.is_finite())
        {
            return Err(NnError::NonFinite("network input".into()));
        }
        Ok(())
    }

    /// Forward pass returning `batch × output_dim` outputs and the tape.
    pub fn forward(&self, x: &SequenceBatch) -> Result<(Vec<f64>, Tape), NnError> {
        self.check_batch(x)?;
        let b = x.batch;
        let mut caches = Vec::with_capacity(self.lstm.len());
        let mut seq = x.by_step();
        for layer in &self.lstm {
            let cache = lstm::forward_batch(layer, seq, b);
            seq = cache.hs.clone();
            caches.push(cache);
        }
        let last = seq.pop().unwrap_or_default();
        let dense_in = match &x.statics {
            None => last,
            Some(st) => {
                let (h, s) = (self.lstm.last().map_or(0, LstmParams::hidden), self.spec.static_dim);
                let mut v = Vec::with_capacity(b * (h + s));
                for i in 0..b {
                    v.extend_from_slice(&last[i * h..(i + 1) * h]);
                    v.extend_from_slice(&st[i * s..(i + 1) * s]);
                }
                v
            }
        };
        let dense_out = dense::forward_batch(&self.dense, &dense_in, b, Activation::Relu);
        let out = dense::forward_batch(&self.head, &dense_out, b, Activation::Linear);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(NnError::NonFinite("network output".into()));
        }
        let tape = Tape { batch: b, lstm: caches, dense_in, dense_out, consumed: false };
        Ok((out, tape))
    }

    pub fn predict(&self, x: &SequenceBatch) -> Result<Vec<f64>, NnError> {
        self.forward(x).map(|(out, _)| out)
    }

    /// Reverse pass from `d_out` (gradient of the scalar loss with respect
    /// to each output). A tape can be used once.
    pub fn backward(&self, tape: &mut Tape, d_out: &[f64]) -> Result<Gradients, NnError> {
        if tape.consumed {
            return Err(NnError::Usage("backward called twice on the same forward record".into()));
        }
        let b = tape.batch;
        if d_out.len() != b * self.spec.output_dim {
            return Err(NnError::Shape(format!(
                "output gradient has {} values, expected {}",
                d_out.len(),
                b * self.spec.output_dim
            )));
        }
        if !d_out.iter().all(|v| v.is_finite()) {
            return Err(NnError::NonFinite("output gradient".into()));
        }
        tape.consumed = true;
        let head_out = Vec::new();
        let (hw, hb, d_dense) =
            dense::backward_batch(&self.head, &tape.dense_out, &head_out, d_out, b, Activation::Linear);
        let (dw, db, d_in) =
            dense::backward_batch(&self.dense, &tape.dense_in, &tape.dense_out, &d_dense, b, Activation::Relu);

        let n_layers = self.lstm.len();
        let h_last = self.lstm[n_layers - 1].hidden();
        let width = self.spec.dense_input();
        let mut d_last = Vec::with_capacity(b * h_last);
        for i in 0..b {
            d_last.extend_from_slice(&d_in[i * width..i * width + h_last]);
        }

        let mut blocks: Vec<Tensor> = Vec::with_capacity(3 * n_layers + 4);
        let mut per_layer = Vec::with_capacity(n_layers);
        let steps = tape.lstm[0].hs.len();
        let mut dhs: Vec<Vec<f64>> = (0..steps)
            .map(|t| if t + 1 == steps { d_last.clone() } else { vec![0.0; b * h_last] })
            .collect();
        for (li, layer) in self.lstm.iter().enumerate().rev() {
            let (g, dxs) = lstm::backward_batch(layer, &tape.lstm[li], &dhs, b, li > 0);
            per_layer.push(g);
            dhs = dxs;
        }
        for g in per_layer.into_iter().rev() {
            blocks.extend([g.input_weights, g.recurrent_weights, g.bias]);
        }
        blocks.extend([dw, db, hw, hb]);
        Ok(Gradients { blocks })
    }

    pub fn apply_adam(&mut self, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<(), NnError> {
        let names = self.param_names();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let g: Vec<&Tensor> = grads.blocks.iter().collect();
        adam_step(&mut self.params_mut(), &g, &names, state, lr)
    }

    pub fn adam_state(&self) -> AdamState {
        AdamState::new(&self.params())
    }

    pub fn encode(&self, enc: &mut Encoder) {
        let s = &self.spec;
        enc.str(GATE_ORDER);
        enc.len(s.input_dim);
        enc.len(s.lstm_units.len());
        for &h in &s.lstm_units {
            enc.len(h);
        }
        enc.len(s.dense_units);
        enc.len(s.output_dim);
        enc.len(s.static_dim);
        let names = self.param_names();
        for (name, t) in names.iter().zip(self.params()) {
            enc.str(name);
            enc.len(t.shape().len());
            for &d in t.shape() {
                enc.len(d);
            }
            enc.f64s(t.data());
        }
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, NnError> {
        let bad = |e: crate::codec::ContainerError| NnError::Snapshot(e.to_string());
        let tag = dec.str().map_err(bad)?;
        if tag != GATE_ORDER {
            return Err(NnError::Snapshot(format!("gate order {tag:?}, expected {GATE_ORDER:?}")));
        }
        let input_dim = dec.read_len().map_err(bad)?;
        let n = dec.read_len().map_err(bad)?;
        let lstm_units = (0..n).map(|_| dec.read_len()).collect::<Result<Vec<_>, _>>().map_err(bad)?;
        let spec = NetworkSpec {
            input_dim,
            lstm_units,
            dense_units: dec.read_len().map_err(bad)?,
            output_dim: dec.read_len().map_err(bad)?,
            static_dim: dec.read_len().map_err(bad)?,
        };
        spec.validate().map_err(|e| NnError::Snapshot(e.to_string()))?;
        let mut d = spec.input_dim;
        let lstm = spec
            .lstm_units
            .iter()
            .map(|&h| {
                let p = LstmParams::zeros(d, h);
                d = h;
                p
            })
            .collect();
        let mut net = Network {
            lstm,
            dense: Dense::zeros(spec.dense_input(), spec.dense_units),
            head: Dense::zeros(spec.dense_units, spec.output_dim),
            spec,
        };
        let names = net.param_names();
        for (name, t) in names.iter().zip(net.params_mut()) {
            let got = dec.str().map_err(bad)?;
            let rank = dec.read_len().map_err(bad)?;
            let shape = (0..rank).map(|_| dec.read_len()).collect::<Result<Vec<_>, _>>().map_err(bad)?;
            if &got != name || shape != t.shape() {
                return Err(NnError::Snapshot(format!(
                    "block {got:?} {shape:?} where {name:?} {:?} was expected",
                    t.shape()
                )));
            }
            let data = dec.f64s().map_err(bad)?;
            if data.len() != t.len() {
                return Err(NnError::Snapshot(format!("block {name} has {} values", data.len())));
            }
            t.data_mut().copy_from_slice(&data);
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.finish(MAGIC, VERSION)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut dec = Decoder::open(bytes, MAGIC, VERSION).map_err(|e| NnError::Snapshot(e.to_string()))?;
        let net = Self::decode(&mut dec)?;
        dec.finish().map_err(|e| NnError::Snapshot(e.to_string()))?;
        Ok(net)
    }
}
