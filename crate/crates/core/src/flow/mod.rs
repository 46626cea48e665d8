//! Rectified flow matching: schedulers, velocity models, pretraining,
//! guided Euler sampling and one-step leap prediction.

pub mod checkpoint;
pub mod data;
pub mod leap;
pub mod model;
pub mod pretrain;
pub mod sampling;
pub mod scheduler;

pub use checkpoint::Checkpoint;
pub use data::MixtureSpec;
pub use leap::{leap_predict, leap_predict_generic, noise_interpolate, predict_endpoints};
pub use model::{
    Activation, Condition, ConstantField, NetSpec, ScalarLinearField, VelocityModel, VelocityNet,
};
pub use pretrain::{fm_pretrain_loss, pretrain, PretrainConfig};
pub use sampling::{
    cfg_velocity, sample_batch, sample_trajectory, sample_trajectory_seeded, SampleSettings, StepMode,
    Trajectory,
};
pub use scheduler::{SchedulePoint, ScheduleTable, Scheduler};
