//! Local differential privacy knowledge-transfer laboratory.
//!
//! Private images are noised once with a per-pixel Laplace mechanism. The
//! protected set is expanded by post-processing (a second random layer, or
//! pixel-wise superimposition of pairs), labeled by a hard-label remote
//! model, and used to train a local model that then labels the clean
//! private data.

pub mod data;
pub mod error;
pub mod experiments;
pub mod latent;
pub mod nn;
pub mod noise;
pub mod oracle;
pub mod seed;
pub mod stats;
pub mod transfer;

pub use error::{Error, Result};
