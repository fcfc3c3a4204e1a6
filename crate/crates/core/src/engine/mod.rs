//! Self-training loop: pseudo-labels, domain mixing, augmentation,
//! optimizer and EMA teacher, checkpoints.

mod augment;
pub mod checkpoint;
mod mix;
mod optim;
mod pseudo;
mod trainer;

pub use augment::{augment, AugmentConfig};
pub use checkpoint::{
    check_resume_compatible, load_checkpoint, read_checkpoint_manifest, save_checkpoint, CheckpointManifest,
};
pub use mix::{classmix, classmix_with_classes, select_classes, MixResult};
pub use optim::{adamw_step, ema_update, group_lr, lr_at, lr_factor, AdamState, AdamWParams, ScheduleConfig};
pub use pseudo::{confidence_fraction, pseudo_label, softmax_probs, PseudoLabel};
pub use trainer::{
    predict_logits, step_rng, teacher_view, train_step, train_step_traced, ModeConfig, MultiresMode, StepMetrics,
    TeacherView, TrainConfig, Trainer, TrainerState,
};
