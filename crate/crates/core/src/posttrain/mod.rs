//! Reward fine-tuning through leap trajectories and the ReFL, DRaFT-LV and
//! DRTune baselines.

pub mod anchors;
pub mod config;
pub mod leap_trajectory;
pub mod methods;
pub mod optim;
pub mod run;

pub use anchors::select_anchors;
pub use config::{FineTuneConfig, Method, RewardInput, Selection, SimilarityMode};
pub use leap_trajectory::{build_leap_chain, build_leap_trajectory, similarity_weight, ChainOptions, LeapTrajectory};
pub use methods::{
    draftlv_step, drtune_step, drtune_train_steps, leapalign_step, refl_step, BatchPlan, ItemOutput, ItemPlan,
    MethodDraws, StepDiagnostics, StepOutput, Trainer,
};
pub use optim::{ema_update, optimizer_step, AdamWConfig, AdamWState};
pub use run::{evaluate, finetune_run, EvalRecord, EvalSpec, EvalStats, RunObserver, RunOutput, TrainRecord};
