//! Masked acoustic-unit mispronunciation detection and correction.
//!
//! Pipeline: synthetic corpus → Gumbel-Softmax VQ autoencoder discovers
//! discrete acoustic units → span corruption trains a phoneme-conditioned
//! encoder-decoder to recover original units and flag corrupted ones →
//! decoder cross-attention maps unit-level error probabilities onto phonemes
//! → flagged units are masked and refilled by a fine-tuned corrector.

pub mod config;
pub mod corpus;
pub mod corruption;
pub mod error;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod parallel;
pub mod pipeline;
pub mod svg;
pub mod vq;

pub use error::{Error, Result};
