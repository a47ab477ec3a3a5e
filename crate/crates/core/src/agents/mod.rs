//! Actor-critic agents trained by backpropagation through world-model
//! rollouts: the reward-maximising agent (RMA) per level and the goal-seeking
//! agent (GSA) per non-top level.

mod imagination;
mod policy;
mod td;

pub use imagination::{
    gsa_rollout_graph, imagine_train_gsa, imagine_train_rma, rma_rollout_graph,
    verify_architectures, AgentMetrics, GsaRolloutSpec, ImaginationDynamics, ImaginationNoise,
    ImaginedBatch, RolloutGraph, RssmDynamics,
};
pub use policy::{ActionSpace, Actor, ActorCritic, Critic, PolicyNoise, PolicyNodes};
pub use td::{td_lambda, td_lambda_nodes};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{Graph, Node};
use crate::rssm::Rssm;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty sequence")]
    EmptySequence,
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("non-finite loss in {0}")]
    NonFinite(String),
    #[error("model error: {0}")]
    Model(#[from] crate::rssm::RssmError),
}

/// Linear epsilon decay from `start` to `end` over `decay_steps` env steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl EpsilonSchedule {
    pub fn value(&self, env_steps: u64) -> f64 {
        if self.decay_steps == 0 || env_steps >= self.decay_steps {
            return self.end;
        }
        let frac = env_steps as f64 / self.decay_steps as f64;
        self.start + (self.end - self.start) * frac
    }
}

/// Per-level agent hyperparameters, shared by the level's RMA and GSA.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    /// Discount factor, in [0, 1).
    pub gamma: f64,
    /// TD-lambda mixing, in [0, 1].
    pub lambda: f64,
    /// Imagination rollout length, capped at 20 by validation.
    pub horizon: usize,
    /// Entropy bonus weight.
    pub eta: f64,
    /// Novelty bonus weight.
    pub mu: f64,
    /// EMA decay of the critic copy.
    pub ema_rate: f64,
    pub epsilon: EpsilonSchedule,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Hidden width of the actor and critic networks.
    pub hidden_dim: usize,
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(AgentError::Config("gamma must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(AgentError::Config("lambda must lie in [0, 1]".into()));
        }
        if self.horizon == 0 || self.horizon > 20 {
            return Err(AgentError::Config(
                "horizon must lie in [1, 20], open-loop quality bounds it".into(),
            ));
        }
        if self.eta < 0.0 || self.mu < 0.0 {
            return Err(AgentError::Config("eta and mu must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_rate) {
            return Err(AgentError::Config("ema_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            horizon: 15,
            eta: 3e-4,
            mu: 0.1,
            ema_rate: 0.98,
            epsilon: EpsilonSchedule {
                start: 0.4,
                end: 0.0,
                decay_steps: 15_000,
            },
            actor_lr: 1e-4,
            critic_lr: 3e-4,
            hidden_dim: 128,
        }
    }
}

/// Reward-to-terminal transform for the GSA: an affine map sends the reward
/// interval `[p, c]` onto logits `[sigma_min, sigma_max]`, extended linearly
/// beyond it, then squashed by the sigmoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GsaTerminalMap {
    /// Reward where the termination probability departs from zero.
    pub p: f64,
    /// Reward where it reaches one.
    pub c: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for GsaTerminalMap {
    fn default() -> Self {
        Self {
            p: -0.01,
            c: -0.0001,
            sigma_min: -5.0,
            sigma_max: 5.0,
        }
    }
}

impl GsaTerminalMap {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.p >= self.c {
            return Err(AgentError::Config("require p < c".into()));
        }
        if self.c > 0.0 {
            return Err(AgentError::Config("require c <= 0 (mse regime)".into()));
        }
        if self.sigma_min >= self.sigma_max {
            return Err(AgentError::Config("require sigma_min < sigma_max".into()));
        }
        Ok(())
    }

    fn logit<S: Scalar>(&self, r: S) -> S {
        let p = S::of_f64(self.p);
        let c = S::of_f64(self.c);
        let lo = S::of_f64(self.sigma_min);
        let hi = S::of_f64(self.sigma_max);
        lo + (r - p) * (hi - lo) / (c - p)
    }

    /// Termination probability for a similarity reward `r`.
    pub fn terminal_weight<S: Scalar>(&self, r: S) -> S {
        let l = self.logit(r);
        S::one() / (S::one() + (-l).exp())
    }

    /// Graph-space variant, elementwise over `[B x 1]` rewards.
    pub fn terminal_node<S: Scalar>(&self, g: &mut Graph<S>, r: Node) -> Node {
        let p = S::of_f64(self.p);
        let scale = S::of_f64((self.sigma_max - self.sigma_min) / (self.c - self.p));
        let shifted = g.add_scalar(r, -p);
        let scaled = g.scale(shifted, scale);
        let logit = g.add_scalar(scaled, S::of_f64(self.sigma_min));
        g.sigmoid(logit)
    }
}

/// KL of the live dynamics prior from the EMA prior at a deterministic state:
/// high where the world model recently changed.
pub fn novelty_bonus<S: Scalar>(
    live: &Rssm<S>,
    ema: &Rssm<S>,
    h: &[S],
) -> Result<S, AgentError> {
    if live.config() != ema.config() {
        return Err(AgentError::ArchitectureMismatch(
            "live and EMA model configs differ".into(),
        ));
    }
    if h.len() != live.config().h_dim {
        return Err(AgentError::ArchitectureMismatch(format!(
            "h has width {}, expected {}",
            h.len(),
            live.config().h_dim
        )));
    }
    let mut g = Graph::new();
    let hn = g.constant(crate::math::Tensor::row_vector(h));
    let p_live = live.prior_head(&mut g, hn, crate::math::Bind::Frozen);
    let p_ema = ema.prior_head(&mut g, hn, crate::math::Bind::Frozen);
    let kl = crate::math::nets::gaussian_kl(&mut g, p_live, p_ema);
    Ok(g.value(kl).item())
}

/// Mean of `0.5 (v - target)^2` over aligned slices.
pub fn critic_loss_value<S: Scalar>(values: &[S], targets: &[S]) -> S {
    assert_eq!(values.len(), targets.len());
    assert!(!values.is_empty());
    let half = S::of_f64(0.5);
    values
        .iter()
        .zip(targets)
        .map(|(&v, &t)| half * (v - t) * (v - t))
        .sum::<S>()
        / S::from_usize(values.len()).unwrap()
}
