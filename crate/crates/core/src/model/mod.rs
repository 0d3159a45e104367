//! The toy shared-backbone multi-task network: graph description, parameter
//! storage, synthetic dataset, per-task losses, and checkpointing.

pub mod checkpoint;
pub mod dataset;
pub mod graph;
pub mod loss;
pub mod net;

pub use checkpoint::{file_sha256, load_checkpoint, save_checkpoint, CheckpointMeta};
pub use dataset::{batch, generate_dataset, Batch, SyntheticSample, IMAGE_SIZE};
pub use graph::{ArchOverrides, HeadIds, LayerNode, ModelGraph, INPUT_ID, TASKS};
pub use loss::{forward_losses, task_losses, TaskLosses};
pub use net::{HeadOutputs, Model};
