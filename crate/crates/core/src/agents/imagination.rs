//! Imagination training: open-loop rollouts through a differentiable model
//! under the current policy, TD-lambda targets over the imagined sequence,
//! and gradient updates for actor and critic.

use rand::Rng;

use super::policy::{Actor, ActorCritic, Critic, PolicyNoise};
use super::td::{td_lambda, td_lambda_nodes};
use super::{AgentConfig, AgentError, GsaTerminalMap};
use crate::goals::{similarity_node, sim_mse_node, GoalSpace, Similarity};
use crate::math::nets::gaussian_kl;
use crate::math::{Bind, Graph, Node, Tensor};
use crate::rssm::{Rssm, SampleMode, StateNodes};
use crate::scalar::Scalar;

/// A differentiable one-step dynamics the agents imagine through.
pub trait ImaginationDynamics<S: Scalar> {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Width of the per-step stochastic noise; 0 for deterministic dynamics.
    fn noise_cols(&self) -> usize;
    /// Advance `s [B x state_dim]` under `action [B x action_dim]`.
    fn step(&self, g: &mut Graph<S>, s: Node, action: Node, noise: Option<&Tensor<S>>) -> Node;
    /// Reward decoded at the arrival state, `[B x 1]`.
    fn reward(&self, g: &mut Graph<S>, s_next: Node) -> Node;
    /// Continuation probability `1 - d_hat` at the arrival state, `[B x 1]`.
    fn continue_prob(&self, g: &mut Graph<S>, s_next: Node) -> Node;
    /// Novelty bonus at the arrival state, `[B x 1]`, nonnegative.
    fn novelty(&self, g: &mut Graph<S>, s_next: Node) -> Node;
}

/// Both models must share an architecture for the novelty KL to make sense.
pub fn verify_architectures<S: Scalar>(live: &Rssm<S>, ema: &Rssm<S>) -> Result<(), AgentError> {
    if live.config() != ema.config() {
        return Err(AgentError::ArchitectureMismatch(
            "live and EMA world models differ".into(),
        ));
    }
    Ok(())
}

/// The real world-model dynamics: open-loop RSSM steps with prior sampling,
/// reward/terminal heads, and the live-vs-EMA prior KL as novelty.
pub struct RssmDynamics<'a, S> {
    live: &'a Rssm<S>,
    ema: &'a Rssm<S>,
}

impl<'a, S: Scalar> RssmDynamics<'a, S> {
    pub fn new(live: &'a Rssm<S>, ema: &'a Rssm<S>) -> Result<Self, AgentError> {
        verify_architectures(live, ema)?;
        Ok(Self { live, ema })
    }

    fn split(&self, g: &mut Graph<S>, s: Node) -> StateNodes {
        let h_dim = self.live.config().h_dim;
        let s_dim = self.live.config().s_dim();
        StateNodes {
            h: g.slice_cols(s, 0, h_dim),
            z: g.slice_cols(s, h_dim, s_dim),
        }
    }
}

impl<S: Scalar> ImaginationDynamics<S> for RssmDynamics<'_, S> {
    fn state_dim(&self) -> usize {
        self.live.config().s_dim()
    }

    fn action_dim(&self) -> usize {
        self.live.config().a_dim
    }

    fn noise_cols(&self) -> usize {
        self.live.config().z_dim
    }

    fn step(&self, g: &mut Graph<S>, s: Node, action: Node, noise: Option<&Tensor<S>>) -> Node {
        let prev = self.split(g, s);
        let h = self.live.core_step(g, prev, action, Bind::Frozen);
        let prior = self.live.prior_head(g, h, Bind::Frozen);
        let z = match noise {
            Some(eps) => {
                let e = g.constant(eps.clone());
                let se = g.mul(prior.std, e);
                g.add(prior.mean, se)
            }
            None => prior.mean,
        };
        g.concat(h, z)
    }

    fn reward(&self, g: &mut Graph<S>, s_next: Node) -> Node {
        self.live.decode_r_node(g, s_next, Bind::Frozen)
    }

    fn continue_prob(&self, g: &mut Graph<S>, s_next: Node) -> Node {
        let logit = self.live.decode_d_logit_node(g, s_next, Bind::Frozen);
        let d = g.sigmoid(logit);
        let neg = g.neg(d);
        g.add_scalar(neg, S::one())
    }

    fn novelty(&self, g: &mut Graph<S>, s_next: Node) -> Node {
        let h_dim = self.live.config().h_dim;
        let h = g.slice_cols(s_next, 0, h_dim);
        let p_live = self.live.prior_head(g, h, Bind::Frozen);
        let p_ema = self.ema.prior_head(g, h, Bind::Frozen);
        gaussian_kl(g, p_live, p_ema)
    }
}

/// Pre-drawn noise for one imagination rollout, one entry per step.
pub struct ImaginationNoise<S> {
    pub policy: Vec<PolicyNoise<S>>,
    pub model: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> ImaginationNoise<S> {
    pub fn draw<D: ImaginationDynamics<S>>(
        dynamics: &D,
        actor: &Actor<S>,
        batch: usize,
        horizon: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let policy = (0..horizon).map(|_| actor.draw_noise(batch, rng)).collect();
        let model = (0..horizon)
            .map(|_| {
                if dynamics.noise_cols() == 0 {
                    None
                } else {
                    Some(crate::rssm::normal_tensor(batch, dynamics.noise_cols(), rng))
                }
            })
            .collect();
        Self { policy, model }
    }
}

/// Nodes extracted from one built rollout graph.
pub struct RolloutGraph {
    pub actor_loss: Node,
    pub dynamics_term: Node,
    pub entropy_term: Node,
    pub novelty_term: Node,
    pub states: Vec<Node>,
    pub actions: Vec<Node>,
    pub rewards: Vec<Node>,
    pub continues: Vec<Node>,
    pub values: Vec<Node>,
    pub ema_values: Vec<Node>,
    /// Critic observations per step (equal to states for the RMA; state and
    /// relative goal concatenated for the GSA).
    pub critic_obs: Vec<Node>,
}

/// The imagined sequences of one training rollout, per spec's diagnostics.
#[derive(Clone, Debug)]
pub struct ImaginedBatch<S> {
    pub states: Vec<Tensor<S>>,
    pub actions: Vec<Tensor<S>>,
    pub rewards: Vec<Tensor<S>>,
    pub continues: Vec<Tensor<S>>,
    pub values: Vec<Tensor<S>>,
    pub ema_values: Vec<Tensor<S>>,
}

/// Scalar metrics of one agent update.
#[derive(Clone, Copy, Debug)]
pub struct AgentMetrics {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub novelty: f64,
    pub mean_value: f64,
    pub mean_reward: f64,
}

struct RewardModel<'a, S> {
    kind: RewardKind<'a, S>,
}

enum RewardKind<'a, S> {
    /// RMA: the model's own reward and terminal heads.
    Environment,
    /// GSA: similarity to a fixed goal, synthetic terminal weights.
    Goal {
        spec: &'a GsaSpecInner<'a, S>,
        goals: Node,
        decoded_goals: Option<Node>,
    },
}

struct GsaSpecInner<'a, S> {
    similarity: Similarity,
    space: GoalSpace,
    terminal_map: &'a GsaTerminalMap,
    cascade: &'a [&'a Rssm<S>],
}

fn cascade_node<S: Scalar>(g: &mut Graph<S>, models: &[&Rssm<S>], s: Node) -> Node {
    let mut x = s;
    for m in models.iter().rev() {
        x = m.decode_x_node(g, x, Bind::Frozen);
    }
    x
}

/// Shared rollout builder for both agent kinds.
#[allow(clippy::too_many_arguments)]
fn rollout_graph_inner<S: Scalar, D: ImaginationDynamics<S>>(
    g: &mut Graph<S>,
    dynamics: &D,
    actor: &Actor<S>,
    critic: &Critic<S>,
    critic_ema: &Critic<S>,
    cfg: &AgentConfig,
    starts: &Tensor<S>,
    noise: &ImaginationNoise<S>,
    actor_bind: Bind,
    reward_model: &RewardModel<'_, S>,
) -> RolloutGraph {
    let horizon = cfg.horizon;
    assert_eq!(noise.policy.len(), horizon, "noise length mismatch");
    let b = starts.rows();
    assert_eq!(starts.cols(), dynamics.state_dim());

    let observe = |g: &mut Graph<S>, s: Node| -> Node {
        match &reward_model.kind {
            RewardKind::Environment => s,
            RewardKind::Goal { goals, .. } => {
                let rel = g.sub(s, *goals);
                g.concat(s, rel)
            }
        }
    };

    let mut s = g.constant(starts.clone());
    let mut states = Vec::with_capacity(horizon);
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    let mut continues = Vec::with_capacity(horizon);
    let mut values = Vec::with_capacity(horizon);
    let mut ema_values = Vec::with_capacity(horizon);
    let mut min_values = Vec::with_capacity(horizon);
    let mut critic_obs = Vec::with_capacity(horizon);
    let mut entropies = Vec::with_capacity(horizon);
    let mut novelties = Vec::with_capacity(horizon);

    for t in 0..horizon {
        let obs = observe(g, s);
        let pol = actor.sample_nodes(g, obs, &noise.policy[t], SampleMode::Sample, actor_bind);
        let s_next = dynamics.step(g, s, pol.action, noise.model[t].as_ref());

        let (r, c) = match &reward_model.kind {
            RewardKind::Environment => (
                dynamics.reward(g, s_next),
                dynamics.continue_prob(g, s_next),
            ),
            RewardKind::Goal {
                spec,
                goals,
                decoded_goals,
            } => {
                let (cmp_state, cmp_goal) = match spec.space {
                    GoalSpace::State => (s_next, *goals),
                    GoalSpace::DecodedObs => (
                        cascade_node(g, spec.cascade, s_next),
                        decoded_goals.expect("decoded goals precomputed"),
                    ),
                };
                let r = similarity_node(spec.similarity, g, cmp_state, cmp_goal);
                // terminal weights always derive from the mse similarity
                let r_mse = match spec.similarity {
                    Similarity::Mse => r,
                    Similarity::Sdp => sim_mse_node(g, cmp_state, cmp_goal),
                };
                let d = spec.terminal_map.terminal_node(g, r_mse);
                let neg = g.neg(d);
                let c = g.add_scalar(neg, S::one());
                (r, c)
            }
        };

        let nov = dynamics.novelty(g, s_next);
        let obs_next = observe(g, s_next);
        let v = critic.value_node(g, obs_next, Bind::Frozen);
        let v_ema = critic_ema.value_node(g, obs_next, Bind::Frozen);
        let v_min = g.minimum(v, v_ema);

        states.push(s_next);
        actions.push(pol.action);
        rewards.push(r);
        continues.push(c);
        values.push(v);
        ema_values.push(v_ema);
        min_values.push(v_min);
        critic_obs.push(obs_next);
        entropies.push(pol.entropy);
        novelties.push(nov);
        s = s_next;
    }

    let gamma = S::of_f64(cfg.gamma);
    let lambda = S::of_f64(cfg.lambda);
    let targets = td_lambda_nodes(g, &rewards, &continues, &min_values, gamma, lambda);

    let sum_b = |g: &mut Graph<S>, nodes: &[Node]| -> Node {
        let mut acc = g.constant(Tensor::zeros(b, 1));
        for &n in nodes {
            acc = g.add(acc, n);
        }
        g.mean_all(acc)
    };

    let dynamics_term = sum_b(g, &targets);
    let entropy_term = sum_b(g, &entropies);
    let novelty_term = sum_b(g, &novelties);

    // L = -sum V^lambda - eta * sum H - mu * sum KL: entropy and novelty both
    // enter as bonuses on the maximised objective
    let neg_dyn = g.neg(dynamics_term);
    let ent_w = g.scale(entropy_term, S::of_f64(cfg.eta));
    let nov_w = g.scale(novelty_term, S::of_f64(cfg.mu));
    let bonus = g.add(ent_w, nov_w);
    let neg_bonus = g.neg(bonus);
    let actor_loss = g.add(neg_dyn, neg_bonus);

    RolloutGraph {
        actor_loss,
        dynamics_term,
        entropy_term,
        novelty_term,
        states,
        actions,
        rewards,
        continues,
        values,
        ema_values,
        critic_obs,
    }
}

/// Build the RMA imagination rollout and actor loss.
#[allow(clippy::too_many_arguments)]
pub fn rma_rollout_graph<S: Scalar, D: ImaginationDynamics<S>>(
    g: &mut Graph<S>,
    dynamics: &D,
    actor: &Actor<S>,
    critic: &Critic<S>,
    critic_ema: &Critic<S>,
    cfg: &AgentConfig,
    starts: &Tensor<S>,
    noise: &ImaginationNoise<S>,
    actor_bind: Bind,
) -> RolloutGraph {
    let reward_model = RewardModel {
        kind: RewardKind::Environment,
    };
    rollout_graph_inner(
        g, dynamics, actor, critic, critic_ema, cfg, starts, noise, actor_bind, &reward_model,
    )
}

/// Goal wiring for a GSA rollout.
pub struct GsaRolloutSpec<'a, S> {
    pub similarity: Similarity,
    pub space: GoalSpace,
    pub terminal_map: &'a GsaTerminalMap,
    /// Model stack `[M^0 .. M^l]` for decoding level-l states to observations.
    pub cascade: &'a [&'a Rssm<S>],
}

/// Build the GSA imagination rollout: observations carry the relative goal,
/// rewards are goal similarities, terminals come from the reward transform
/// (never from the model's own terminal head).
#[allow(clippy::too_many_arguments)]
pub fn gsa_rollout_graph<S: Scalar, D: ImaginationDynamics<S>>(
    g: &mut Graph<S>,
    dynamics: &D,
    actor: &Actor<S>,
    critic: &Critic<S>,
    critic_ema: &Critic<S>,
    cfg: &AgentConfig,
    starts: &Tensor<S>,
    goals: &Tensor<S>,
    noise: &ImaginationNoise<S>,
    spec: &GsaRolloutSpec<'_, S>,
    actor_bind: Bind,
) -> RolloutGraph {
    assert_eq!(starts.shape(), goals.shape(), "start/goal shape mismatch");
    let goals_node = g.constant(goals.clone());
    let inner = GsaSpecInner {
        similarity: spec.similarity,
        space: spec.space,
        terminal_map: spec.terminal_map,
        cascade: spec.cascade,
    };
    let decoded_goals = match spec.space {
        GoalSpace::State => None,
        GoalSpace::DecodedObs => {
            let dg = cascade_node(g, spec.cascade, goals_node);
            Some(g.detach(dg))
        }
    };
    let reward_model = RewardModel {
        kind: RewardKind::Goal {
            spec: &inner,
            goals: goals_node,
            decoded_goals,
        },
    };
    rollout_graph_inner(
        g, dynamics, actor, critic, critic_ema, cfg, starts, noise, actor_bind, &reward_model,
    )
}

fn extract_batch<S: Scalar>(g: &Graph<S>, ro: &RolloutGraph) -> ImaginedBatch<S> {
    let grab = |nodes: &[Node]| nodes.iter().map(|&n| g.value(n).clone()).collect();
    ImaginedBatch {
        states: grab(&ro.states),
        actions: grab(&ro.actions),
        rewards: grab(&ro.rewards),
        continues: grab(&ro.continues),
        values: grab(&ro.values),
        ema_values: grab(&ro.ema_values),
    }
}

/// Critic regression against TD-lambda targets computed from live values,
/// with gradients blocked through the targets (they enter as constants).
fn critic_update<S: Scalar>(
    agent: &mut ActorCritic<S>,
    critic_obs: &[Tensor<S>],
    batch: &ImaginedBatch<S>,
) -> Result<f64, AgentError> {
    let horizon = batch.rewards.len();
    let b = batch.rewards[0].rows();
    let gamma = S::of_f64(agent.cfg.gamma);
    let lambda = S::of_f64(agent.cfg.lambda);

    let obs_dim = critic_obs[0].cols();
    let mut stacked_obs = Tensor::zeros(horizon * b, obs_dim);
    let mut stacked_targets = Tensor::zeros(horizon * b, 1);
    for row in 0..b {
        let r: Vec<S> = batch.rewards.iter().map(|t| t.get(row, 0)).collect();
        let c: Vec<S> = batch.continues.iter().map(|t| t.get(row, 0)).collect();
        let v: Vec<S> = batch.values.iter().map(|t| t.get(row, 0)).collect();
        let targets = td_lambda(&r, &c, &v, gamma, lambda)?;
        for t in 0..horizon {
            let flat = t * b + row;
            stacked_obs
                .row_mut(flat)
                .copy_from_slice(critic_obs[t].row(row));
            stacked_targets.set(flat, 0, targets[t]);
        }
    }

    let mut g = Graph::new();
    let obs = g.constant(stacked_obs);
    let tgt = g.constant(stacked_targets);
    let v = agent.critic.value_node(&mut g, obs, Bind::Trainable);
    let d = g.sub(v, tgt);
    let sq = g.square(d);
    let half = g.scale(sq, S::of_f64(0.5));
    let loss = g.mean_all(half);
    let loss_v = g.scalar_value(loss).as_f64();
    if !loss_v.is_finite() {
        return Err(AgentError::NonFinite("critic loss".into()));
    }
    let grads = g.backward(loss);
    let pg = g.param_grads(&grads, agent.critic.store());
    agent.critic_adam.step(agent.critic.store_mut(), pg);
    Ok(loss_v)
}

fn mean_of<S: Scalar>(tensors: &[Tensor<S>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in tensors {
        for v in t.data() {
            sum += v.as_f64();
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

fn finish_update<S: Scalar>(
    g: Graph<S>,
    ro: RolloutGraph,
    agent: &mut ActorCritic<S>,
    what: &str,
) -> Result<(AgentMetrics, ImaginedBatch<S>), AgentError> {
    let actor_loss = g.scalar_value(ro.actor_loss).as_f64();
    if !actor_loss.is_finite() {
        return Err(AgentError::NonFinite(format!("{what} actor loss")));
    }
    let batch = extract_batch(&g, &ro);
    let critic_obs: Vec<Tensor<S>> = ro.critic_obs.iter().map(|&n| g.value(n).clone()).collect();
    let entropy = g.scalar_value(ro.entropy_term).as_f64() / agent.cfg.horizon as f64;
    let novelty = g.scalar_value(ro.novelty_term).as_f64() / agent.cfg.horizon as f64;

    let grads = g.backward(ro.actor_loss);
    let pg = g.param_grads(&grads, agent.actor.store());
    agent.actor_adam.step(agent.actor.store_mut(), pg);

    let critic_loss = critic_update(agent, &critic_obs, &batch)?;
    agent.update_critic_ema();

    let metrics = AgentMetrics {
        actor_loss,
        critic_loss,
        entropy,
        novelty,
        mean_value: mean_of(&batch.values),
        mean_reward: mean_of(&batch.rewards),
    };
    Ok((metrics, batch))
}

/// One RMA update: imagination rollout from grounded start states, actor step
/// on the TD-lambda objective, critic regression, EMA critic update.
pub fn imagine_train_rma<S: Scalar, D: ImaginationDynamics<S>>(
    dynamics: &D,
    agent: &mut ActorCritic<S>,
    starts: &Tensor<S>,
    rng: &mut impl Rng,
) -> Result<(AgentMetrics, ImaginedBatch<S>), AgentError> {
    let noise = ImaginationNoise::draw(dynamics, &agent.actor, starts.rows(), agent.cfg.horizon, rng);
    let mut g = Graph::new();
    let ro = rma_rollout_graph(
        &mut g,
        dynamics,
        &agent.actor,
        &agent.critic,
        &agent.critic_ema,
        &agent.cfg,
        starts,
        &noise,
        Bind::Trainable,
    );
    finish_update(g, ro, agent, "rma")
}

/// One GSA update from (start, goal) pairs drawn from the same replay
/// trajectories.
pub fn imagine_train_gsa<S: Scalar, D: ImaginationDynamics<S>>(
    dynamics: &D,
    agent: &mut ActorCritic<S>,
    starts: &Tensor<S>,
    goals: &Tensor<S>,
    spec: &GsaRolloutSpec<'_, S>,
    rng: &mut impl Rng,
) -> Result<(AgentMetrics, ImaginedBatch<S>), AgentError> {
    let noise = ImaginationNoise::draw(dynamics, &agent.actor, starts.rows(), agent.cfg.horizon, rng);
    let mut g = Graph::new();
    let ro = gsa_rollout_graph(
        &mut g,
        dynamics,
        &agent.actor,
        &agent.critic,
        &agent.critic_ema,
        &agent.cfg,
        starts,
        goals,
        &noise,
        spec,
        Bind::Trainable,
    );
    finish_update(g, ro, agent, "gsa")
}
