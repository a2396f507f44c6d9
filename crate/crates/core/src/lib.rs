//! Few-shot cross-subject brain decoding laboratory.
//!
//! A synthetic multi-subject fMRI generator with known ground truth, the
//! spectral (amplitude/phase) cross-subject losses, a residual HRF adapter in
//! front of a frozen contrastive brain encoder, density-based one-shot
//! stimulus selection, embedding-level evaluation, and the staged pipeline
//! that ties them together.

pub mod array;
pub mod config;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod pipeline;
pub mod select;
pub mod spectral;
pub mod synthgen;
pub mod train;

pub use config::{ExperimentConfig, SelectionStrategy, Supervision};
pub use error::{Error, Result};
pub use losses::{LossReport, LossWeights};
pub use models::{AdapterParams, EncoderParams, ModelDims};
pub use spectral::{PooledVoxels, Spectrum};
pub use synthgen::{Dataset, SubjectProfile, VoxelSeries};
