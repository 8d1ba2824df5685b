//! Post-encoder embedding toolkit: truncated-SVD compression with
//! quality-guided rate search, slotted composition of a fixed-width ensemble
//! vector, unsupervised refinement of seasonal embeddings through a tied
//! linear map, and downstream evaluation with bias-free probes.
//!
//! The toolkit consumes embeddings and encoder first-layer weights as files
//! (the `EMB1` container) and never executes a neural network. Every
//! operation is deterministic given its inputs and seed.

pub mod adapt;
pub mod cluster;
pub mod ensemble;
pub mod error;
pub mod eval;
mod linalg;
pub mod matrix;
pub mod refine;
pub mod store;
pub mod svd;

pub use error::{Error, Result};
pub use matrix::{concat_columns, EmbeddingMatrix};
pub use store::{load_embeddings, save_embeddings, Manifest, ManifestEntry, SampleMetadata};
