//! Desk-scale reward alignment for flow-matching generative models.
//!
//! The crate provides a small f64 autodiff engine, rectified-flow noise
//! schedules with closed-form single-step recovery (denoising and
//! inversion directions), toy generator/reward networks, text-conditioned
//! reward formulations with semantic-relative preferences, the alignment
//! trainers built on them, and a synthetic image domain with controllable
//! attributes for measuring reward-hacking drift.

pub mod diffusion;
pub mod error;
pub mod nets;
pub mod rewards;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainers;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
