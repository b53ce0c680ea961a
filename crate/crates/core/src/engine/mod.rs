//! Training: base pretraining, generative replay, distillation and staged
//! continual adaptation.

pub mod loss;
pub mod optim;
pub mod replay;
pub mod schedule;
pub mod train;

pub use loss::{kd_loss, kd_loss_mean, total_loss, KD_FLOOR};
pub use optim::{clip_global_norm, Adam};
pub use replay::{
    build_replay_set, generate_batch, generate_pseudo_trajectory, replay_count, sample_with_temperature, teacher_distributions,
    Record, ReplayConfig, TeacherSnapshot,
};
pub use schedule::{build_stage_schedule, collect_activation_stats, select_trainable_params, ActivationStats, Stage, StageSchedule};
pub use train::{
    base_train, batch_objective, continual_update, mean_loss, next_teacher, train_with_mask, EpochLog, RoundManifest, RoundOutput, StageRecord,
    TrainConfig, Variant,
};
