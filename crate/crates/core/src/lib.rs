//! Hierarchical world-model laboratory.
//!
//! Builds a stack of temporally abstracted recurrent state-space world models
//! over an episodic environment, trains reward-maximising and goal-seeking
//! actor-critic agents inside those models, and ships the diagnostics needed
//! to detect model exploitation on the abstract levels.

pub mod abstraction;
pub mod agents;
pub mod envs;
pub mod goals;
pub mod hierarchy;
pub mod math;
pub mod persist;
pub mod rssm;
pub mod scalar;
pub mod trajectory;

pub use scalar::Scalar;

/// Default scalar type used by the CLI and the experiment configs.
pub type Real = f64;
