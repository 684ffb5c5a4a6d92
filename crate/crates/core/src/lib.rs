//! Branching random walks killed below a barrier: simulation of the truncated
//! additive and derivative martingales and statistical checks of their tails.

pub mod analysis;
pub mod engine;
pub mod error;
pub mod harness;
pub mod model;
pub mod perpetuity;
pub mod rng;
pub mod spine;
pub mod stats;
pub mod walk;

pub use error::{Error, Result};
