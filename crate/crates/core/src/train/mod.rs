//! Training configuration, SGD, the epoch loop with early stopping,
//! checkpoints, component ablations and the protocol runner.

mod checkpoint;
mod config;
mod optim;
mod runner;
mod trainer;

pub use checkpoint::{
    load_checkpoint, read_tensors, save_checkpoint, Checkpoint, CheckpointHeader, TensorEntry,
    FORMAT_VERSION, MAGIC,
};
pub use config::{
    lr_at, DataConfig, Monitor, OptimizerConfig, Preset, TrainConfig, CONFIG_VERSION,
};
pub use optim::Sgd;
pub use runner::{
    fold_from_splits, fold_manifest, run_ablation, run_fold, run_protocol, AblationReport,
    AblationRow, FoldRun,
};
pub use trainer::{
    evaluate_dev, open_store, read_log, score_split, split_frames, train, DevMetrics, EpochLog,
    LossParts, RunState, TrainOutcome, CHECKPOINT_FILE, LOG_FILE,
};
