//! Error-slice discovery for frozen classifiers: a weighted Gaussian mixture
//! over embeddings, error distances and confidences, plus the evaluations
//! built on it.

// negated float comparisons are how NaN inputs get rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bundle;
pub mod cli;
pub mod discover;
pub mod error;
pub mod exact;
pub mod explain;
pub mod improve;
pub mod mixture;
pub mod par;
pub mod sdm;
pub mod synth;

pub use error::{Error, Result};
