//! Model assembly, augmentation, optimization and checkpoints.

pub mod augment;
pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod train;

pub use augment::{augment_with_params, AugmentSpec};
pub use checkpoint::Checkpoint;
pub use model::{AblationFlags, Canonical, ClassifierConfig, Model, ModelConfig, Noise, WarpedBatch};
pub use optim::AdamW;
pub use train::{accuracy, derive_seed, train, EpochLog, Example, StepLog, TrainConfig, TrainState};
