//! Desk-scale laboratory for direct-gradient reward fine-tuning of rectified
//! flow models.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: reverse-mode tape with stop-gradient, discount-blend and
//!   straight-through nodes, plus a finite-difference oracle.
//! - [`flow`]: schedulers, velocity models, pretraining, guided Euler
//!   sampling and one-step leap prediction.
//! - [`reward`]: differentiable synthetic rewards, the hinge objective and a
//!   rule-based compositional evaluator.
//! - [`posttrain`]: leap-trajectory fine-tuning and the ReFL, DRaFT-LV and
//!   DRTune baselines, with AdamW and EMA.
//! - [`oracle`]: closed-form gradient assembly and checks that do not use
//!   the backward pass.
//! - [`harness`]: experiment configuration, run orchestration and file
//!   formats used by the `leapflow` binary.

pub mod autodiff;
pub mod error;
pub mod flow;
pub mod harness;
pub mod oracle;
pub mod posttrain;
pub mod reward;

pub use error::{Error, Result};
