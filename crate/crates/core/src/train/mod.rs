//! Optimisation, training loop, retrieval evaluation, checkpoints and the
//! ablation harness.

mod ablation;
mod checkpoint;
mod config;
mod optim;
mod run;

pub use ablation::{ablation_suite, AblationArm, AblationReport, AblationSpec, ArmSummary, RunRecord};
pub use checkpoint::{
    load_checkpoint, parse_header, save_checkpoint, Checkpoint, CheckpointHeader, RngState, TensorEntry, MAGIC, VERSION,
};
pub use config::TrainConfig;
pub use optim::{default_decay_mask, lr_schedule, AdamW, AdamWHyper, Schedule};
pub use run::{
    evaluate_retrieval, metrics_csv, recall_at_1, resume_run, train_run, train_teacher, MetricRow, Retrieval,
    RunSummary, Trainer, METRICS_HEADER,
};
