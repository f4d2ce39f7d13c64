//! Melody-lyrics matching engine.
//!
//! Retrieves and ranks singable lyrics for a symbolic melody query. The
//! pipeline parses a line-level song corpus, converts lyrics into sylphone
//! sequences (syllable-level phonetic units) and melodies into 177-D note
//! features, trains a dual sequence encoder with a contrastive soft-DTW
//! alignment loss, decodes note-syllable alignments with classical DTW, and
//! scores matches with retrieval and alignment-quality metrics.
//!
//! Numeric kernels (alignment, encoder, losses) are generic over the
//! [`scalar::Scalar`] type; the pipeline instantiates them at [`Real`].

pub mod align;
pub mod baselines;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod matrix;
pub mod melody;
pub mod metrics;
pub mod phonetics;
pub mod retrieval;
pub mod scalar;
pub mod training;

pub use error::{CoreError, Result};
pub use scalar::Scalar;

/// Working precision of the shipped pipeline.
pub type Real = f64;

/// Concrete aliases at pipeline precision.
pub type RealMatrix = matrix::Matrix<Real>;
pub type RealCostMatrix = align::CostMatrix<Real>;
pub type RealSoftAlignment = align::SoftAlignment<Real>;
