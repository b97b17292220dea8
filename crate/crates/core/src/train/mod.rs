//! Two-pass sub-cube training, optimization schedule, and run orchestration.

mod optim;
mod run;
mod schedule;
mod step;

pub use optim::{clip_grad_norm, global_grad_norm, AdamW, AdamWConfig};
pub use run::{
    dataset_pairs, evaluate, load_dataset, predict_mask, train, Precision, RunConfig, Subject, TrainConfig, TrainEvent,
    TrainSummary,
};
pub use schedule::{cv_split, early_stop, lr_at, EarlyStopping};
pub use step::{
    plain_gradients, plain_step, predict_logits, single_tape_gradients, two_pass_gradients, two_pass_step, Sample,
    StepOutcome,
};
