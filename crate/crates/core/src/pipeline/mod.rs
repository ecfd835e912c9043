//! Data ingestion, optimization, the pre-training loop, checkpoints and metrics.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod optim;
pub mod train;

pub use checkpoint::{checkpoint_from, restore_model, resume_trainer, save_checkpoint, Checkpoint, NamedTensor, Payload};
pub use config::{Precision, TrainConfig, DATA_DIR_ENV};
pub use data::{
    load_cifar10_binary, load_cifar10_dir, normalize_batch, synthetic_dataset, write_synthetic_cifar, ChannelStats, Dataset, Split,
    NUM_CLASSES,
};
pub use metrics::{read_metrics, write_summary, MetricsRow, MetricsWriter, RunSummary, CSV_HEADER};
pub use optim::{adamw_step, effective_lr, AdamWConfig, LrSchedule, MomentSlot, OptimState};
pub use train::{batch_loss, epoch_batches, epoch_means, prepare_batch, pretrain_step, EpochMean, PreparedBatch, StepRecord, Trainer};
