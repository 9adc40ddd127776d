//! Relation-aware driver action recognition.
//!
//! A video clip is encoded into a token grid, refined through three chained
//! reasoning stages (action, object, relation tokens), aligned against a bank
//! of encoded text prototypes with a straight-through one-hot selection, and
//! fused by dynamically weighted mixture before classification.

pub mod backbone;
pub mod bank;
pub mod checkpoint;
pub mod coa;
pub mod data_model;
pub mod dataset;
pub mod defaults;
pub mod error;
pub mod harness;
pub mod model;
pub mod mot;
pub mod nn;
pub mod synth;

pub use error::{Error, Result};
