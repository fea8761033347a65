//! Multi-head self-attention with selectable position schemes, the
//! encoder stack built on it, and checkpoint persistence.

pub mod check;
pub mod checkpoint;
mod encoder;
pub mod logits;

pub use encoder::{
    Encoder, EncoderConfig, ForwardOptions, ForwardOutput, HeadCapture, HeadParams, XlnetParams, MASKED_LOGIT,
};
pub use logits::{
    logits_m1m2, logits_m3, logits_m4, logits_m4_alt, logits_shaw, logits_vanilla, logits_xlnet, TableView, XlnetView,
};
