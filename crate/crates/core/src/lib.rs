// SPDX-License-Identifier: MIT OR Apache-2.0

//! Knowledge-neuron analysis for a small masked-language-model transformer.
//!
//! The crate trains a BERT-style encoder to memorise synthetic relational
//! facts, attributes each fact to FFN intermediate neurons with integrated
//! gradients, and edits the model through those neurons: suppressing or
//! amplifying their activations, rewriting their value slots to update a
//! fact, or zeroing them to erase a relation.

pub mod attribution;
pub mod error;
pub mod facts;
pub mod gradcheck;
pub mod intervention;
pub mod model;
pub mod surgery;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{KnError, Result};
