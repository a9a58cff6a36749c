//! Cooperative cross-stream network.
//!
//! Two modality streams (appearance `f` and motion `o`) are coupled by a
//! pairwise-correlation connection block, aggregated into instance
//! embeddings, passed through a shared projection and classifier, and
//! trained jointly under a cross-modality triplet loss, a per-modality
//! discriminative embedding loss and cross-entropy.

pub mod connection;
pub mod diagnostics;
pub mod error;
pub mod evalharness;
pub mod extractor;
pub mod losses;
mod modality;
pub mod model;
pub mod numeric;
pub mod sampler;
pub mod seed;
pub mod shared;
pub mod synthdata;
pub mod trainer;

pub use error::{CcsError, Result};
pub use modality::Modality;
