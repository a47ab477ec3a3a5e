//! Replay storage: a ring of ground-truth trajectories with a uniform
//! trajectory-segment sampler. Only real environment data is ever stored;
//! simulated steps never enter the buffer.

use std::collections::VecDeque;

use rand::Rng;

use crate::scalar::Scalar;
use crate::trajectory::Trajectory;

#[derive(Debug)]
pub struct ReplayBuffer<S> {
    trajs: VecDeque<Trajectory<S>>,
    capacity_steps: usize,
    total_steps: usize,
}

impl<S: Scalar> ReplayBuffer<S> {
    pub fn new(capacity_steps: usize) -> Self {
        assert!(capacity_steps > 0);
        Self {
            trajs: VecDeque::new(),
            capacity_steps,
            total_steps: 0,
        }
    }

    /// Store one collected episode, evicting the oldest episodes while over
    /// capacity.
    pub fn push(&mut self, traj: Trajectory<S>) {
        self.total_steps += traj.env_steps();
        self.trajs.push_back(traj);
        while self.total_steps > self.capacity_steps && self.trajs.len() > 1 {
            if let Some(old) = self.trajs.pop_front() {
                self.total_steps -= old.env_steps();
            }
        }
    }

    pub fn num_trajectories(&self) -> usize {
        self.trajs.len()
    }

    pub fn num_steps(&self) -> usize {
        self.total_steps
    }

    pub fn is_empty(&self) -> bool {
        self.trajs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory<S>> {
        self.trajs.iter()
    }

    /// Sample `n` fixed-length segments uniformly over all (trajectory,
    /// start) pairs. Starts skip the reset row so segments hold environment
    /// steps only; short tails are zero-padded with the mask cleared.
    pub fn sample_segments(
        &self,
        n: usize,
        len: usize,
        rng: &mut impl Rng,
    ) -> Vec<Trajectory<S>> {
        assert!(!self.trajs.is_empty(), "sampling from an empty replay buffer");
        // each trajectory offers one start per environment-step row
        let weights: Vec<usize> = self.trajs.iter().map(Trajectory::env_steps).collect();
        let total: usize = weights.iter().sum();
        assert!(total > 0, "replay holds no environment steps");
        (0..n)
            .map(|_| {
                let mut pick = rng.gen_range(0..total);
                let mut idx = 0;
                for (i, &w) in weights.iter().enumerate() {
                    if pick < w {
                        idx = i;
                        break;
                    }
                    pick -= w;
                }
                let traj = &self.trajs[idx];
                let start = 1 + rng.gen_range(0..traj.env_steps());
                traj.segment(start, len)
            })
            .collect()
    }
}
