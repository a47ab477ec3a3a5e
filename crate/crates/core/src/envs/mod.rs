//! Episodic environments with vector observations.

mod nav2d;

pub use nav2d::{Nav2d, Nav2dVariant};

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step called on an episode whose terminal already fired")]
    EpisodeOver,
    #[error("action has dimension {got}, expected {expected}")]
    ActionDim { got: usize, expected: usize },
}

/// Static description of an environment's interface.
#[derive(Clone, Debug)]
pub struct EnvSpec<S> {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub act_low: Vec<S>,
    pub act_high: Vec<S>,
    pub max_steps: usize,
}

impl<S: Scalar> EnvSpec<S> {
    pub fn validate(&self) {
        assert!(self.max_steps > 0, "max_steps must be positive");
        assert_eq!(self.act_low.len(), self.act_dim);
        assert_eq!(self.act_high.len(), self.act_dim);
        for (lo, hi) in self.act_low.iter().zip(&self.act_high) {
            assert!(*lo < *hi, "act_low must be below act_high elementwise");
        }
    }
}

/// Result of one environment step.
#[derive(Clone, Debug)]
pub struct StepResult<S> {
    pub observation: Vec<S>,
    pub reward: S,
    pub terminal: bool,
}

/// Episodic environment: reset with a seed, then step until terminal.
pub trait Environment<S: Scalar> {
    fn spec(&self) -> &EnvSpec<S>;

    /// Start a new episode. The same seed yields the same episode start.
    fn reset(&mut self, seed: u64) -> Vec<S>;

    /// Advance one step. Out-of-range actions are clamped, not rejected.
    fn step(&mut self, action: &[S]) -> Result<StepResult<S>, EnvError>;
}
