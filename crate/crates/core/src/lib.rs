//! View-augmented knowledge distillation with angular diversity losses.
//!
//! A frozen teacher's final feature is fed through several lightweight view
//! heads. The heads are trained with a margin-constrained inter-view angular
//! loss, an offset (intra) angular loss and label supervision; the teacher and
//! its views are averaged into an ensemble that supervises a student.
//! The [`diversity`] module verifies the variance identities and the
//! expected-loss bound that relate angular spread to ensemble quality.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod augment;
pub mod cli;
pub mod autodiff;
pub mod data;
pub mod diversity;
pub mod error;
pub mod harness;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
