//! Contrastive caption–image and caption–caption alignment.

mod checkpoint;
mod loss;
mod trainer;


pub use checkpoint::{AlignmentCheckpoint, CheckpointMeta, DEFAULT_PROJ_DIM, INIT_TEMPERATURE};
pub use loss::{
    clamp_log_temperature, contrastive_loss, contrastive_loss_value, text_text_loss,
    MAX_TEMPERATURE, MIN_TEMPERATURE, NORM_TOLERANCE,
};
pub use trainer::{train_alignment, LogRow, Phase, TrainSchedule};
