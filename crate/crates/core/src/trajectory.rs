//! Trajectory storage shared by the replay buffer, the world models and the
//! temporal abstraction pipeline.

use serde::{Deserialize, Serialize};

use crate::math::Tensor;
use crate::scalar::Scalar;

/// A sequence of steps at one hierarchy level.
///
/// Row `t` holds the input `x_t` (an observation on level 0, a goal state on
/// higher levels), the action that led *into* this row, and the reward and
/// terminal flag received upon arriving. Fresh episodes start with a reset
/// row: zero action, zero reward, zero terminal, the reset observation.
/// Padded rows (from segmenting or chunking) carry `mask = false`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory<S> {
    pub xs: Vec<Vec<S>>,
    pub prev_actions: Vec<Vec<S>>,
    pub rewards: Vec<S>,
    pub terminals: Vec<S>,
    pub mask: Vec<bool>,
}

impl<S: Scalar> Trajectory<S> {
    pub fn new() -> Self {
        Self {
            xs: Vec::new(),
            prev_actions: Vec::new(),
            rewards: Vec::new(),
            terminals: Vec::new(),
            mask: Vec::new(),
        }
    }

    /// Start an episode trajectory with its reset row.
    pub fn from_reset(obs: Vec<S>, act_dim: usize) -> Self {
        let mut t = Self::new();
        t.push(obs, vec![S::zero(); act_dim], S::zero(), S::zero(), true);
        t
    }

    pub fn push(&mut self, x: Vec<S>, prev_action: Vec<S>, reward: S, terminal: S, valid: bool) {
        self.xs.push(x);
        self.prev_actions.push(prev_action);
        self.rewards.push(reward);
        self.terminals.push(terminal);
        self.mask.push(valid);
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn x_dim(&self) -> usize {
        self.xs.first().map_or(0, Vec::len)
    }

    pub fn a_dim(&self) -> usize {
        self.prev_actions.first().map_or(0, Vec::len)
    }

    /// Number of valid (unmasked) rows.
    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Environment steps represented (valid rows minus the reset row).
    pub fn env_steps(&self) -> usize {
        self.valid_len().saturating_sub(1)
    }

    /// Sum of rewards over valid rows.
    pub fn episode_return(&self) -> S {
        self.rewards
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(&r, _)| r)
            .sum()
    }

    /// Copy of rows `from..from + len`, zero-padded with invalid rows if the
    /// source is too short.
    pub fn segment(&self, from: usize, len: usize) -> Self {
        let x_dim = self.x_dim();
        let a_dim = self.a_dim();
        let mut out = Self::new();
        for t in from..from + len {
            if t < self.len() {
                out.push(
                    self.xs[t].clone(),
                    self.prev_actions[t].clone(),
                    self.rewards[t],
                    self.terminals[t],
                    self.mask[t],
                );
            } else {
                out.push(
                    vec![S::zero(); x_dim],
                    vec![S::zero(); a_dim],
                    S::zero(),
                    S::zero(),
                    false,
                );
            }
        }
        out
    }
}

impl<S: Scalar> Default for Trajectory<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Time-major batch of equal-length trajectories, ready for sequence models.
#[derive(Clone, Debug)]
pub struct SeqBatch<S> {
    pub batch: usize,
    pub steps: usize,
    pub x: Vec<Tensor<S>>,
    pub a: Vec<Tensor<S>>,
    pub r: Vec<Tensor<S>>,
    pub d: Vec<Tensor<S>>,
    pub mask: Vec<Tensor<S>>,
}

impl<S: Scalar> SeqBatch<S> {
    pub fn from_trajectories(trajs: &[&Trajectory<S>]) -> Self {
        assert!(!trajs.is_empty(), "empty batch");
        let steps = trajs[0].len();
        assert!(
            trajs.iter().all(|t| t.len() == steps),
            "trajectories must share length"
        );
        let batch = trajs.len();
        let mut x = Vec::with_capacity(steps);
        let mut a = Vec::with_capacity(steps);
        let mut r = Vec::with_capacity(steps);
        let mut d = Vec::with_capacity(steps);
        let mut mask = Vec::with_capacity(steps);
        for t in 0..steps {
            x.push(Tensor::from_rows(
                &trajs.iter().map(|tr| tr.xs[t].clone()).collect::<Vec<_>>(),
            ));
            a.push(Tensor::from_rows(
                &trajs
                    .iter()
                    .map(|tr| tr.prev_actions[t].clone())
                    .collect::<Vec<_>>(),
            ));
            r.push(Tensor::from_vec(
                batch,
                1,
                trajs.iter().map(|tr| tr.rewards[t]).collect(),
            ));
            d.push(Tensor::from_vec(
                batch,
                1,
                trajs.iter().map(|tr| tr.terminals[t]).collect(),
            ));
            mask.push(Tensor::from_vec(
                batch,
                1,
                trajs
                    .iter()
                    .map(|tr| if tr.mask[t] { S::one() } else { S::zero() })
                    .collect(),
            ));
        }
        Self {
            batch,
            steps,
            x,
            a,
            r,
            d,
            mask,
        }
    }

    pub fn x_dim(&self) -> usize {
        self.x[0].cols()
    }

    pub fn a_dim(&self) -> usize {
        self.a[0].cols()
    }

    pub fn total_valid(&self) -> S {
        self.mask.iter().map(Tensor::sum).sum()
    }
}
