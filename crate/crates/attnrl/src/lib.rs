//! Attention-based policy architectures for desk-scale off-policy RL.
//!
//! The crate provides a tape-based f64 autodiff tensor, neural building
//! blocks, four attention policy cores (spatial attention, Transformer-XL,
//! combined spatio-temporal, divided/joint space-time), V-trace actor-critic
//! losses, a MonoBeast-style actor-learner pipeline, toy environments, and
//! attention/saliency visualization emitters.

pub mod agent;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod envs;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod mott;
pub mod optim;
pub mod pipeline;
pub mod tensor;
pub mod timesformer;
pub mod vtrace;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{Activation, Tensor};
