//! Training loop, evaluation, checkpoints and multi-seed comparisons.

pub mod checkpoint;
pub mod compare;
pub mod model;
pub mod train;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use compare::{compare_experiments, median, Comparison, ComparisonRow};
pub use model::{Model, ModelDims, ModelKind};
pub use train::{argmax, evaluate, train, EpochRecord, Evaluation, TrainConfig, TrainTrace};
