//! Transfer-learning harness built on a small reverse-mode autodiff engine.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: dense `f64` tensors and a dynamic tape.
//! * [`nn`]: layers, the micro residual CNN and its checkpoint format.
//! * [`optim`]: Adam/SGD, cosine restarts, discriminative slices and the
//!   learning-rate range test.
//! * [`data`]: PGM loading, synthetic corpora, augmentation, stratified folds
//!   and batch streams.
//! * [`metrics`]: confusion matrices, micro/macro scores and top losses.
//! * [`protocol`]: source pretraining followed by the three fine-tuning stages,
//!   cross-validated, plus the from-scratch control arm.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod protocol;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
