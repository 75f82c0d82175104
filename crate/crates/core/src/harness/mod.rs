//! Toy transformer, synthetic tasks, training loops, configuration and
//! persistence.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod pipeline;
pub mod tasks;
pub mod train;

pub use checkpoint::{load_final, load_search, save_final, save_search, CheckpointKind, Manifest, SearchCheckpoint};
pub use config::{AllocationSource, FinetuneConfig, MoeConfig, RunConfig, ToyTransformerConfig, OUTPUT_ENV};
pub use model::{Block, Projection, ToyTransformer};
pub use tasks::{generate_task, Example, TaskFamily, TaskSpec};
pub use train::{evaluate, finetune, sft_loss, EpochMetrics, EvalMetrics, FinetuneReport};
