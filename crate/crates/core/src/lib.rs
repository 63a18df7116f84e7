//! Decoding toolkit: beam search, minimum Bayes-risk (MBR) reranking and
//! later-stage MBR decoding over pluggable sequence models.
//!
//! The pieces, bottom-up:
//!
//! - [`ngram_bleu`]: smoothed sentence-level BLEU, both as a pairwise scalar
//!   function and as a batch kernel over an n-gram count matrix.
//! - [`risk`]: evidence-space probabilities, Bayes risk and rerankers.
//! - [`model`]: the [`model::SequenceModel`] trait and a toy statistical
//!   translation model.
//! - [`search`]: beam search with discarded-hypothesis capture and
//!   later-stage MBR decoding.
//! - [`approx`]: a recurrent approximator of the BLEU discrepancy.
//! - [`policy`]: a Gaussian policy producing per-input score weights,
//!   trained with REINFORCE.

pub mod approx;
pub mod error;
pub mod model;
pub mod ngram_bleu;
pub mod policy;
pub mod risk;
pub mod search;
pub mod tensor_io;
pub mod tokens;

pub use error::{Error, Result};
pub use tokens::{TokenId, TokenSeq};
