//! Joint and individual variation decomposition of multi-block data.
//!
//! The engine splits K row-aligned data blocks into a shared (joint)
//! component, per-block individual components and residual noise, using an
//! angle-based segmentation of the per-block score spaces. Every SVD in the
//! pipeline goes through a pluggable backend: `classical` is the ordinary
//! SVD, `robust` replaces it with a Huber M-estimation fit that tolerates
//! cell-wise outliers and missing entries.

pub mod ajive;
pub mod error;
pub mod io;
pub mod metrics;
pub mod robust_svd;
pub mod simulation;

pub use ajive::{
    decompose, AjiveConfig, AjiveResult, Backend, BlockDecomposition, MultiBlockDataset,
    SegmentationConfig,
};
pub use error::{Error, Result};
pub use robust_svd::{classical_svd, robust_svd, HuberConfig, Matrix, MissingMask};

/// On-disk format version accepted and emitted by the I/O layer.
pub const SCHEMA_VERSION: &str = "1";
