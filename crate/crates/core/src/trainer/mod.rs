//! Pretraining, finetuning, evaluation and checkpointing.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod finetune;
pub mod optim;
pub mod pretrain;

pub use checkpoint::Checkpoint;
pub use config::{Preset, TrainConfig};
pub use eval::{eval_retrieval, mlm_accuracy, recall_at_k, RetrievalReport};
pub use finetune::{finetune, FinetuneConfig, FinetuneReport, Task};
pub use optim::{clip_global_norm, warmup_lr, AdamConfig, AdamW};
pub use pretrain::{pretrain, read_metrics, step_gradients, MetricsRecord, PretrainOutcome, Trainer};
