//! Reward-aware trajectory shaping for few-step flow-matching samplers.
//!
//! A few-step student sampler is fine-tuned against a differentiable reward
//! while a many-step EMA teacher supplies gated intermediate guidance. All of
//! it runs on small synthetic conditional mixtures with a hand-written
//! reverse-mode differentiation core.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod objective;
pub mod optim;
pub mod reward;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
