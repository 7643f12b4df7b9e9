//! Streaming Conv-Transformer Transducer.
//!
//! An audio encoder of three blocks, each a stack of causal convolutions
//! (one of them stride-2 in time) followed by unidirectional Transformer
//! layers with relative position encoding and bounded left context. The
//! only future context comes from convolution right padding, so the
//! look-ahead is a fixed property of the configuration (14 input frames,
//! 140 ms, for the default). A Transformer prediction network and a
//! single-hidden-layer joint network complete the transducer; training uses
//! a forward-backward loss over the alignment lattice and NovoGrad.
//!
//! Modules:
//! - [`engine`]: arrays, a tape for reverse-mode gradients, checkpoints.
//! - [`frontend`]: log-mel features and SpecAugment-style masking.
//! - [`encoder`]: configuration, look-ahead arithmetic, offline and
//!   streaming encoders, relative attention.
//! - [`predictor`]: prediction network and joint network.
//! - [`loss`]: transducer loss with an enumeration oracle.
//! - [`decoder`]: streaming greedy and beam search.
//! - [`trainer`]: NovoGrad, learning-rate schedule, toy data and training.
//! - [`report`]: latency tables and loss-check sweeps used by the CLI.

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod frontend;
pub mod loss;
pub mod manifest;
pub mod model;
pub mod predictor;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};
