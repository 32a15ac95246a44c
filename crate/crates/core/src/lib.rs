//! Multi-granularity multimodal knowledge graph retrieval.
//!
//! The crate turns a multimodal corpus (text chunks with dependency parses,
//! images, entity groundings and embeddings) into a heterogeneous graph of
//! chunk, image and multimodal entity nodes, and answers text and/or image
//! queries by activating seed nodes at four granularities, pooling them onto
//! entity nodes through incidence matrices, and diffusing the result with
//! Personalized PageRank.
//!
//! Pipeline overview:
//!
//! * [`extract`] pulls rule-based relation triplets out of dependency parses.
//! * [`graph`] applies the grounding threshold, fuses multimodal nodes and
//!   builds edges and incidence matrices.
//! * [`embedding`] holds the four normalized embedding matrices and providers.
//! * [`retrieval`] covers seed activation, the transition matrix,
//!   propagation and ranking.
//! * [`eval`] computes Recall@K.
//! * [`ingest`], [`index`], [`config`] and [`commands`] define the on-disk
//!   formats and the build / query / eval / inspect lifecycle.
//!
//! Data-parallel inner loops (similarity scoring, sparse propagation, batch
//! evaluation) run on rayon when the `parallel` feature is enabled and fall
//! back to sequential loops otherwise. Results are identical either way.

pub mod commands;
pub mod config;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod extract;
pub mod graph;
pub mod index;
pub mod ingest;
pub mod mgem;
pub mod par;
pub mod retrieval;

pub use error::{Error, Result};
pub use par::Execution;
