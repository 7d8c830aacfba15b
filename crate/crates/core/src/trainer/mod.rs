//! Preset configuration and the training loop: schedules, layerwise rates,
//! clipping, AdamW, fractional-epoch validation, early stopping, top-k
//! checkpoints and greedy soup.

pub mod config;
pub mod optim;
pub mod run;
pub mod schedule;
pub mod soup;

pub use config::*;
pub use optim::AdamW;
pub use run::{
    epoch_order, read_history, steps_per_epoch, train, validation_steps, write_history,
    HistoryRecord, TrainOptions, TrainState, TrainStatus, TrainingTask,
};
pub use schedule::{clip_gradients, global_norm, layerwise_lr_map, lr_at, lr_multipliers};
pub use soup::{average_weights, greedy_soup, CheckpointRecord, SoupResult};

#[cfg(test)]
mod tests;
