//! Caption-guided visual saliency on a from-scratch LSTM encoder-decoder.
//!
//! The crate trains a small sequence-to-sequence captioner on synthetic
//! scenes and explains each generated (or queried) word by probing the model
//! with single input descriptors: the information lost when only one frame
//! or one spatial cell is encoded measures how much that item supports the
//! word.

pub mod cli;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod saliency;
pub mod seq2seq;
pub mod synthworld;
pub mod training;

pub use error::{Error, Result};
