//! Post hoc detection and mitigation of prediction shortcuts in classifiers
//! whose feature extractor is frozen.
//!
//! The workflow operates entirely on precomputed embeddings:
//!
//! 1. [`probe`] selects confident held-out samples and partitions them by how
//!    the current head predicts them.
//! 2. [`detector`] learns a low-dimensional subspace whose projections alone
//!    reproduce the head's predictions across classes, i.e. the shortcut.
//! 3. [`mitigate`] retrains only the linear head so that it stays accurate on
//!    the embeddings while the shortcut projections lose predictive power.
//! 4. [`metrics`] reports worst-group, worst-class and average accuracy.
//!
//! [`theory`] holds numerical checks of the residual-projection identities
//! behind the mitigation objective.

mod codec;

pub mod batch;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod head;
pub mod metrics;
pub mod mitigate;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod sgd;
pub mod synth;
pub mod theory;

pub use config::PipelineConfig;
pub use dataset::{EmbeddingDataset, EmbeddingRecord};
pub use detector::ShortcutDetector;
pub use error::{Error, FormatError, Result};
pub use head::LinearHead;
pub use metrics::MetricsReport;
pub use probe::ProbePartitions;
