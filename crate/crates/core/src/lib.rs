//! Single-gate mixture of experts with a base-model branch.
//!
//! The base model is trained on all data; its pre-logits are clustered to
//! build a soft initial gate; experts are trained independently on
//! gate-weighted data starting from the base model's tail; and at inference
//! a single threshold trades accuracy for compute by early-exiting to the
//! base model or mixing in the most likely experts.

pub mod analysis;
pub mod anytime;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gate_init;
pub mod json;
pub mod matrix;
pub mod moe;
pub mod nn;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
