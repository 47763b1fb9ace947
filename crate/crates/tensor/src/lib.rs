//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Everything the language-identification models need lives here: the layers
//! (linear, 2-D convolution, batch/layer norm, GRU, LSTM, self-attention
//! building blocks), the two losses (softmax cross-entropy and CTC), dropout,
//! the Adam optimizer and a central finite-difference gradient checker.
//!
//! Computation is recorded on a [`Tape`]. Each recorded op keeps whatever it
//! needs for its backward pass; [`Tape::backward`] walks the tape in reverse and
//! returns [`Gradients`]. Trainable weights live in a [`ParamStore`] and enter a
//! tape through [`Tape::param`].

mod conv;
mod error;
mod float;
pub mod gradcheck;
mod loss;
mod norm;
mod ops;
pub mod optim;
mod param;
mod rnn;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use float::Float;
pub use loss::{ctc_feasible, ctc_loss_and_grad};
pub use norm::{BnMode, BnStats};
pub use optim::{clip_grad_norm, Adam};
pub use rnn::GruWeights;
pub use param::{init_tensor, Init, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
