//! Training: configuration, schedule, image history, optimizer, checkpoints and the loop.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod pool;
pub mod trainer;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CycleModels, ModelCheckpoint};
pub use config::{lr_at_epoch, TrainConfig};
pub use optim::Adam;
pub use pool::HistoryBuffer;
pub use trainer::{train, StepLosses, TrainOptions, TrainState, BEST, LATEST, LOSS_LOG};
