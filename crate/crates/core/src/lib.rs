//! Speaker-verification toolkit: features, augmentation, embedding networks,
//! margin losses, PLDA/cosine backends, score normalization and evaluation.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod backend;
pub mod demo;
pub mod error;
pub mod evalnorm;
pub mod features;
pub mod loss;
pub mod nnet;
pub mod synth;
pub mod tensor_io;

pub use backend::{Embedding, PldaModel, PreprocessChain};
pub use error::{Error, ErrorKind, Result};
pub use evalnorm::{CohortStats, DcfParams, TrialScores};
pub use features::{FeatureConfig, FeatureMatrix, Waveform};
pub use nnet::{Network, NetworkSpec};
