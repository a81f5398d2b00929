//! Product quantization with predefined orthonormal codebooks.
//!
//! The crate covers the whole pipeline:
//!
//! * [`codebook`] builds deterministic orthonormal codebooks from the DCT-II basis,
//! * [`quantizer`] holds the forward soft/hard quantization primitives,
//! * [`metric_loss`] implements the subspace-wise angular-margin loss and the entropy regularizer,
//! * [`trainer`] trains the quantization head with hand-derived gradients and momentum SGD,
//! * [`index`] encodes databases and answers top-k queries through probability lookup tables,
//! * [`eval`] computes MAP, P@T and PR curves,
//! * [`data_io`] reads/writes embedding files and generates synthetic clustered data.

#![allow(clippy::needless_range_loop)]

pub mod codebook;
pub mod data_io;
mod error;
pub mod eval;
pub mod index;
pub mod linalg;
pub mod metric_loss;
pub mod quantizer;
pub mod trainer;
mod wire;

pub use codebook::{Codebook, CodebookSet, CodebookSpec};
pub use data_io::EmbeddingDataset;
pub use error::{Error, Result};
pub use index::{EncodedDatabase, QuerySoftRep, RankedResult};
pub use linalg::Matrix;
pub use metric_loss::{Hyperparams, LossBreakdown};
pub use trainer::{CodebookMode, ModelParams, TrainConfig};
