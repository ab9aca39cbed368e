//! Soft Q imitation learning (SQIL), behavioral cloning and regularized
//! behavioral cloning on small stochastic gridworlds.

pub mod approx;
pub mod checkpoint;
pub mod envs;
mod error;
pub mod harness;
pub mod replay;
pub mod rng;
pub mod softq;
pub mod trainers;

pub use error::{Error, Result};
