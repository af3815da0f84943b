//! Joint contrastive and captioning objective, optimizer, tuning regimes,
//! dataset mixing and the training loop.

pub mod fit;
pub mod loss;
pub mod mixing;
pub mod optim;
pub mod trainer;
pub mod tuning;
pub mod vqa;

pub use fit::{corpus_captions, corpus_clips, corpus_tokens, fit, TrainInputs};
pub use loss::{captioning_loss, contrastive_loss, total_loss, LossWeights};
pub use mixing::{mix_batches, MixedBatches, Source};
pub use optim::{clip_global_norm, ema_update, lr_schedule, Optimizer, OptimizerConfig};
pub use trainer::{joint_loss, step_log, StepRecord, TrainConfig, Trainer, VisualInput, STEP_LOG_HEADER};
pub use tuning::{freeze_mask, TuningMode};
pub use vqa::{train_vqa, vqa_accuracy, vqa_examples, VqaExample};
