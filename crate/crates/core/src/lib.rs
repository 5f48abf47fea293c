//! Core analytics for auditing candidate concept directions in sentence
//! embedding spaces.
//!
//! The crate is organised around an immutable [`EmbeddingStore`]. Every
//! analysis takes a store (or one per dataset) and returns plain data that
//! can be serialized as JSON or CSV:
//!
//! - [`directions`]: neuron / random / custom directions, projection scores,
//!   top activating sentences and activation-range overlap.
//! - [`geometry`]: exact nearest neighbours, distance histograms, the
//!   locality score and outlier analysis.
//! - [`tokenstats`]: token frequency across activation quintiles.
//! - [`separability`]: one-vs-rest linear SVM, confusion matrices and a PCA
//!   projection.
//! - [`synth`]: synthetic stores with planted concepts and ground truth.
//! - [`annotation`]: blinded annotation packs, record validation and the
//!   agreement report.

pub mod annotation;
pub mod directions;
pub mod error;
pub mod geometry;
pub mod rng;
pub mod separability;
pub mod stats;
pub mod store;
pub mod synth;
pub mod tokenstats;

pub use directions::{ActivationEntry, ActivationResult, Direction, DirectionKind};
pub use error::{Error, Result};
pub use store::{EmbeddingStore, NormReport, SentenceRecord, TokenScheme};

/// Default number of top activating sentences, nearest neighbours and
/// random comparison sentences.
pub const DEFAULT_K: usize = 10;

/// Default number of histogram bins for locality scoring.
pub const DEFAULT_BINS: usize = 50;
