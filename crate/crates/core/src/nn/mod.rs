//! Dense-tensor neural network core with hand-derived gradients.

pub mod adam;
pub mod dense;
pub mod gradcheck;
pub(crate) mod linalg;
pub mod loss;
pub mod lstm;
pub mod network;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use dense::{dense_forward, Activation, Dense};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use loss::{mse_loss, pinball_loss, pinball_loss_batch, HUB_QUANTILES};
pub use lstm::{lstm_cell_forward, lstm_layer_forward, LstmParams, GATE_ORDER};
pub use network::{Gradients, Network, NetworkSpec, SequenceBatch, Tape};
pub use tensor::Tensor;
