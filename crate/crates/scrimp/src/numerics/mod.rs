//! Minimal dense-tensor layer library with reverse-mode differentiation,
//! just large enough for the policy network: convolution, pooling, dense
//! layers, LSTM cell, GRU gating, layer normalization, softmax, and
//! multi-head attention, plus a finite-difference gradient oracle.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{AdamConfig, Graph, ParamStore};
pub use tape::{Id, Tape};
pub use tensor::Tensor;
