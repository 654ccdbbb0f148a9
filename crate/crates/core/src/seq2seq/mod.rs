//! LSTM encoder-decoder captioner with an optional soft-attention decoder.
//!
//! The encoder reduces each descriptor with a fully-connected layer and runs
//! an LSTM over the sequence; its final (hidden, cell) state initialises the
//! decoder LSTM, which emits one word distribution per step.

pub mod checkpoint;
mod model;
pub(crate) mod net;
mod params;
mod sequence;
mod vocab;

pub use model::{sanitize_tokens, AttentionDecoded, Decoded, EncoderState, Encoding, Model};
pub use params::{
    AttentionParams, EncoderKind, LstmCell, ModelConfig, ModelParams, FORGET_BIAS, INIT_RANGE,
};
pub use sequence::{DescriptorSequence, Grid, Pooling};
pub use vocab::{Encoded, Vocabulary, BOS, EOS, PAD, UNK};
