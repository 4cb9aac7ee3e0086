//! Indoor-space legibility toolkit.
//!
//! The crate covers the numeric side of the pipeline: cutting perspective
//! views out of equirectangular panoramas, assembling a segment-labelled
//! dataset, training a small residual CNN to localize views, and turning the
//! classifier's output into legibility tables, class activation maps,
//! segment-similarity matrices and modularity-based clusters.

pub mod corpus;
pub mod error;
pub mod legibility;
pub mod nnet;
pub mod projection;
pub mod similarity;

pub use error::{Error, Result};
