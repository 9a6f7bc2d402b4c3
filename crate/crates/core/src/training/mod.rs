//! Synthetic motion data, the optimizer and learning-rate schedule, and the
//! three-stage training curriculum. Training runs in `f64`.

mod curriculum;
mod optim;
mod scheduler;
mod synthetic;

pub use curriculum::{
    derive_seed, run_curriculum, run_curriculum_with, CurriculumConfig, EpochRecord, TrainingLog, TRAINING_LOG_HEADER,
};
pub use optim::{clip_global_norm, AdamW, AdamWConfig};
pub use scheduler::{PlateauConfig, PlateauScheduler};
pub use synthetic::{generate_synthetic_dataset, SyntheticDataset, SyntheticDatasetSpec};
