//! Transformer self-attention with absolute, sinusoid and relative
//! position embeddings.
//!
//! * [`tensor`]: dense tensors, a reverse-mode tape and optimizers.
//! * [`posembed`]: position tables, index resolution and parameter counts.
//! * [`attention`]: logit variants, multi-head attention and the encoder.
//! * [`tasks`]: synthetic position-sensitive tasks, training and evaluation.

pub mod attention;
pub mod error;
pub mod posembed;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
