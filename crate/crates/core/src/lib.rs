//! Safety-guided DDPG: an off-policy actor-critic learner whose actor is
//! steered by a Gaussian-process lower confidence bound on the one-step
//! difference of a learned guard function.

pub mod agent;
pub mod checkpoint;
pub mod confidence;
pub mod env;
pub mod error;
pub mod gp;
pub mod harness;
pub mod nn;
pub mod selftest;

pub use error::{Error, Result};
