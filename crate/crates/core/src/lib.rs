//! Core of the access-controlled adapter serving stack.
//!
//! Documents are chunked and embedded into a tagged [`vector_store`]; a query
//! retrieves candidate adapters by cosine similarity, the [`permissions`]
//! table splits them into permitted and hinted sets, and the [`model`] mixes
//! the permitted low-rank [`adapters`] with similarity-proportional weights.
//! [`pipeline`] wires these steps together. [`audit`] scores verbatim
//! word-level overlap between model outputs and a training corpus.

pub mod adapters;
pub mod audit;
pub mod codec;
pub mod embedding;
pub mod error;
pub mod model;
pub mod permissions;
pub mod pipeline;
pub mod synth;
pub mod vector_store;

pub use error::{Error, Result};
