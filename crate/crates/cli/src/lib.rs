//! Training, inference and evaluation pipeline around `tsnca-core`:
//! dataset ingestion, the two training stages, checkpoint serialization,
//! configuration handling and the metric report writer.

pub mod checkpoint;
pub mod config;
pub mod convert;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod pipeline;
pub mod train;

#[doc(hidden)]
pub mod testutil;

pub use error::{Error, Result};
