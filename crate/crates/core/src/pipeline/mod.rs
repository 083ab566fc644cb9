//! Synthetic data, training, inference, checkpoints and ablations.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod infer;
pub mod model;
pub mod proposals;
pub mod train;

pub use checkpoint::{Checkpoint, Snapshot};
pub use config::{JitterSpec, PoolSource, RunConfig};
pub use data::{gen_synthetic_dataset, load_dataset, save_dataset, Dataset, DatasetSpec, SyntheticScene};
pub use infer::{detect, evaluate_model, InferOptions};
pub use model::Model;
pub use train::{train, TrainOutcome};
