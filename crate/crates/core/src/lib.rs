//! Temporal facial-feature classification of conversation videos.
//!
//! The pipeline runs detection records through frame sampling and
//! main-face filtering ([`preprocessing`]), groups face-present frames into
//! segments and fixed-length sequences ([`temporal`]), embeds every face
//! with a convolutional autoencoder ([`cae`]), classifies sequences with a
//! transformer that adds sequential, sequence and segment position
//! embeddings ([`transformer`]), and evaluates videos by majority vote under
//! participant-level cross-validation ([`harness`]). [`synth`] generates
//! labelled cohorts with a planted temporal signal.

pub mod cae;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod preprocessing;
pub mod report;
pub mod seed;
pub mod synth;
pub mod temporal;
pub mod transformer;
pub mod types;

pub use error::{Error, Result};
pub use numerics::{Scalar, Tensor};
pub use types::Label;
