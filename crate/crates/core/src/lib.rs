//! Amortised sequential samplers for unnormalised densities, trained off-policy
//! with trajectory balance using SMC as the behaviour policy and an
//! importance-weighted replay buffer.

pub mod autodiff;
pub mod buffer;
pub mod checkpoint;
pub mod config;
pub mod enumerate;
pub mod error;
pub mod math;
pub mod metrics;
pub mod objectives;
pub mod process;
pub mod smc;
pub mod targets;
pub mod trainer;

pub use error::{Error, Result};
