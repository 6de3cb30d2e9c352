//! Run configuration, training and evaluation loops, few-shot finetuning,
//! gradient audits and ablations.

mod ablate;
mod audit;
mod config;
mod fewshot;
mod train;

pub use ablate::{ablate, Arm, ArmResult};
pub use audit::{gradcheck, tiny_config, GradcheckReport, GRADCHECK_TOLERANCE};
pub use config::{Precision, RunConfig, TailPolicy, SEED_ENV};
pub use fewshot::{composer_param, fewshot_finetune, novel_samples, FewshotRun};
pub use train::{
    class_mean, evaluate, evaluate_checkpoint, init_store, train, Checkpoint, Dataset, MetricsRecord, TrainRun,
    CHECKPOINT_FILE, METRICS_FILE,
};
