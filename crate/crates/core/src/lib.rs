//! Neighbourhood classification for cross-lingual content flagging.
//!
//! A query is embedded into a frozen vector space, its `k` nearest
//! neighbours are retrieved from a labelled source corpus, and a small
//! trainable head scores the query against the neighbourhood:
//!
//! 1. a shared projection maps query and neighbours into a representation
//!    space (bi-encoder), or externally supplied pair vectors are used
//!    directly (cross-encoder);
//! 2. per-neighbour interaction features are trained to predict label
//!    agreement between query and neighbour;
//! 3. structured self-attention pools the interaction features and a
//!    linear layer classifies the query.
//!
//! The crate also carries the classical voting baselines, representation
//! re-ranking, metrics and reports, and a synthetic data generator used
//! by the test suites.

pub mod baselines;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod eval;
pub mod index;
pub mod model;
pub mod par;
pub mod synth;
pub mod train;

pub use dataset::{BinaryLabel, Dataset, DatasetRole, Example, LabelVocabulary, SplitSpec};
pub use embed::{EmbeddingTable, Tables};
pub use error::{Error, Result};
pub use index::{Hit, Index, Neighbourhood};
pub use model::{ForwardTrace, HeadConfig, HeadParams, Interaction};
pub use par::Execution;
