//! Loss, AdamW, cosine schedule and the epoch loop.

mod optim;
mod trainer;

pub use optim::{bce_loss, cosine_lr, AdamW, AdamWConfig, PROB_CLAMP};
pub use trainer::{
    history_csv, sample_gradients, train_loop, EpochRecord, Storage, TrainConfig, TrainOutcome,
    Trainer, HISTORY_HEADER,
};
