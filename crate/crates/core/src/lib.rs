//! Uncertainty-aware exploratory DPO on a toy conditional token policy.
//!
//! The crate is organised bottom-up:
//!
//! - [`toy_policy`]: a linear-softmax token policy with analytic gradients.
//! - [`visual_noise`]: forward-diffusion corruption of image features.
//! - [`uncertainty`]: per-token visual sensitivity, epistemic uncertainty,
//!   quantile masks and exploration-intensity factors.
//! - [`preference_loss`]: DPO and exploration-weighted DPO losses and gradients.
//! - [`theory_lab`]: closed-form optimum of the exploration-regularized
//!   single-state objective, checked against brute force.
//! - [`synth_world`]: a seeded synthetic multimodal world with planted
//!   under-recognized attribute tokens.
//! - [`harness`]: configuration, optimizer, training loop, reports and exports.

pub mod error;
pub mod harness;
pub mod optim;
pub mod preference_loss;
pub mod rng;
pub mod synth_world;
pub mod theory_lab;
pub mod toy_policy;
pub mod uncertainty;
pub mod visual_noise;

pub use error::{LabError, Result};
