//! Synthetic data, persistence formats and end-to-end pipelines.

pub mod checkpoint;
pub mod dataset;
pub mod formats;
pub mod pipeline;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use dataset::{generate_dataset, Dataset, EvalSet, SyntheticDatasetConfig};
