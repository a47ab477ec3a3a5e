//! Policy and value networks. Continuous actions use a tanh-squashed diagonal
//! Gaussian scaled to the action box; discrete actions (clustered abstract
//! actions) use a categorical with straight-through gradients.

use rand::Rng;

use super::{AgentConfig, AgentError};
use crate::math::nets::Bind;
use crate::math::{Adam, Graph, Mlp, Node, ParamStore, Tensor};
use crate::rssm::SampleMode;
use crate::scalar::Scalar;

/// Softplus floor on the pre-squash policy stddev.
const POLICY_MIN_STD: f64 = 0.1;

const LN_2PI: f64 = 1.8378770664093453;

/// Action space of one hierarchy level.
#[derive(Clone, Debug)]
pub enum ActionSpace<S> {
    Box { low: Vec<S>, high: Vec<S> },
    Discrete { n: usize },
}

impl<S: Scalar> ActionSpace<S> {
    /// Width of the action as consumed by the world model.
    pub fn model_dim(&self) -> usize {
        match self {
            Self::Box { low, .. } => low.len(),
            Self::Discrete { n } => *n,
        }
    }

    fn head_dim(&self) -> usize {
        match self {
            Self::Box { low, .. } => 2 * low.len(),
            Self::Discrete { n } => *n,
        }
    }

    fn center_half(&self) -> (Vec<S>, Vec<S>) {
        match self {
            Self::Box { low, high } => {
                let half = S::of_f64(0.5);
                let center: Vec<S> = low.iter().zip(high).map(|(&l, &h)| (l + h) * half).collect();
                let halfw: Vec<S> = low.iter().zip(high).map(|(&l, &h)| (h - l) * half).collect();
                (center, halfw)
            }
            Self::Discrete { .. } => unreachable!("box geometry on discrete space"),
        }
    }
}

/// Per-step sampling noise, pre-drawn so losses are reproducible.
#[derive(Clone, Debug)]
pub enum PolicyNoise<S> {
    Continuous(Tensor<S>),
    /// One uniform draw per batch row for inverse-CDF category sampling.
    Discrete(Vec<f64>),
}

/// Nodes produced by one policy sampling step.
#[derive(Clone, Copy, Debug)]
pub struct PolicyNodes {
    /// Action in model-input representation, `[B x model_dim]`.
    pub action: Node,
    /// Single-sample entropy estimate (continuous) or exact entropy
    /// (discrete), `[B x 1]`.
    pub entropy: Node,
}

/// Stochastic policy head over an observation vector.
#[derive(Debug)]
pub struct Actor<S> {
    store: ParamStore<S>,
    net: Mlp,
    space: ActionSpace<S>,
    obs_dim: usize,
}

impl<S: Scalar> Actor<S> {
    pub fn new(
        obs_dim: usize,
        space: ActionSpace<S>,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut store = ParamStore::new();
        let net = Mlp::init_scaled_head(
            &mut store,
            "actor",
            obs_dim,
            &[hidden_dim, hidden_dim],
            space.head_dim(),
            0.1,
            rng,
        );
        Self {
            store,
            net,
            space,
            obs_dim,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn space(&self) -> &ActionSpace<S> {
        &self.space
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn draw_noise(&self, batch: usize, rng: &mut impl Rng) -> PolicyNoise<S> {
        match &self.space {
            ActionSpace::Box { low, .. } => PolicyNoise::Continuous(
                crate::rssm::normal_tensor(batch, low.len(), rng),
            ),
            ActionSpace::Discrete { .. } => {
                PolicyNoise::Discrete((0..batch).map(|_| rng.gen::<f64>()).collect())
            }
        }
    }

    /// Sample actions inside a graph with injectable noise.
    pub fn sample_nodes(
        &self,
        g: &mut Graph<S>,
        obs: Node,
        noise: &PolicyNoise<S>,
        mode: SampleMode,
        bind: Bind,
    ) -> PolicyNodes {
        let head = self.net.forward(g, &self.store, obs, bind);
        match (&self.space, noise) {
            (ActionSpace::Box { low, .. }, PolicyNoise::Continuous(eps)) => {
                let dim = low.len();
                let mean = g.slice_cols(head, 0, dim);
                let raw = g.slice_cols(head, dim, 2 * dim);
                let sp = g.softplus(raw);
                let std = g.add_scalar(sp, S::of_f64(POLICY_MIN_STD));

                let u = match mode {
                    SampleMode::Mean => mean,
                    SampleMode::Sample => {
                        let e = g.constant(eps.clone());
                        let se = g.mul(std, e);
                        g.add(mean, se)
                    }
                };
                let squashed = g.tanh(u);
                let (center, halfw) = self.space.center_half();
                let rows = g.value(obs).rows();
                let c = g.constant(Tensor::row_vector(&center));
                let c = g.broadcast_rows(c, rows);
                let hw = g.constant(Tensor::row_vector(&halfw));
                let hw = g.broadcast_rows(hw, rows);
                let scaled = g.mul(squashed, hw);
                let action = g.add(scaled, c);

                // -log p(action): Gaussian term plus tanh and scaling corrections
                // ln(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u))
                let e = match mode {
                    SampleMode::Mean => g.constant(Tensor::zeros(rows, dim)),
                    SampleMode::Sample => g.constant(eps.clone()),
                };
                let e2 = g.square(e);
                let half_e2 = g.scale(e2, S::of_f64(-0.5));
                let ln_std = g.ln(std);
                let neg_ln_std = g.neg(ln_std);
                let mut logp = g.add(half_e2, neg_ln_std);
                logp = g.add_scalar(logp, S::of_f64(-0.5 * LN_2PI));
                let minus_2u = g.scale(u, S::of_f64(-2.0));
                let sp2u = g.softplus(minus_2u);
                let tanh_corr = g.add(u, sp2u);
                let tanh_corr = g.add_scalar(tanh_corr, S::of_f64(-std::f64::consts::LN_2));
                let tanh_corr = g.scale(tanh_corr, S::of_f64(2.0));
                // log p_a = log p_u - ln(1 - tanh^2 u) - ln halfwidth
                logp = g.add(logp, tanh_corr);
                let ln_hw = Tensor::row_vector(
                    &halfw.iter().map(|&h| h.ln()).collect::<Vec<S>>(),
                );
                let lhw = g.constant(ln_hw);
                let lhw = g.broadcast_rows(lhw, rows);
                let neg_lhw = g.neg(lhw);
                logp = g.add(logp, neg_lhw);
                let logp_sum = g.sum_cols(logp);
                let entropy = g.neg(logp_sum);
                PolicyNodes { action, entropy }
            }
            (ActionSpace::Discrete { n }, PolicyNoise::Discrete(uniforms)) => {
                let lse = g.logsumexp_cols(head);
                let lse_b = g.broadcast_cols(lse, *n);
                let log_probs = g.sub(head, lse_b);
                let probs = g.exp(log_probs);

                let rows = g.value(obs).rows();
                let pv = g.value(probs).clone();
                let mut onehot = Tensor::zeros(rows, *n);
                for r in 0..rows {
                    let idx = match mode {
                        SampleMode::Mean => {
                            let row = pv.row(r);
                            let mut best = 0;
                            for (i, &p) in row.iter().enumerate() {
                                if p > row[best] {
                                    best = i;
                                }
                            }
                            best
                        }
                        SampleMode::Sample => {
                            let mut acc = 0.0f64;
                            let u = uniforms[r];
                            let mut chosen = *n - 1;
                            for (i, &p) in pv.row(r).iter().enumerate() {
                                acc += p.as_f64();
                                if u < acc {
                                    chosen = i;
                                    break;
                                }
                            }
                            chosen
                        }
                    };
                    onehot.set(r, idx, S::one());
                }
                let oh = g.constant(onehot);
                // straight-through: forward one-hot, backward softmax
                let detached = g.detach(probs);
                let st = g.sub(probs, detached);
                let action = g.add(oh, st);

                let plogp = g.mul(probs, log_probs);
                let neg_ent = g.sum_cols(plogp);
                let entropy = g.neg(neg_ent);
                PolicyNodes { action, entropy }
            }
            _ => panic!("noise kind does not match action space"),
        }
    }

    /// Sample one action for real-environment acting, with epsilon-greedy
    /// exploration over the action space.
    pub fn act(
        &self,
        obs: &[S],
        epsilon: f64,
        mode: SampleMode,
        rng: &mut impl Rng,
    ) -> Result<Vec<S>, AgentError> {
        if obs.len() != self.obs_dim {
            return Err(AgentError::ArchitectureMismatch(format!(
                "observation width {} does not match actor input {}",
                obs.len(),
                self.obs_dim
            )));
        }
        if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
            return Ok(match &self.space {
                ActionSpace::Box { low, high } => low
                    .iter()
                    .zip(high)
                    .map(|(&l, &h)| S::sample_uniform(rng, l, h))
                    .collect(),
                ActionSpace::Discrete { n } => {
                    let mut one_hot = vec![S::zero(); *n];
                    one_hot[rng.gen_range(0..*n)] = S::one();
                    one_hot
                }
            });
        }
        let mut g = Graph::new();
        let o = g.constant(Tensor::row_vector(obs));
        let noise = self.draw_noise(1, rng);
        let nodes = self.sample_nodes(&mut g, o, &noise, mode, Bind::Frozen);
        Ok(g.value(nodes.action).row(0).to_vec())
    }
}

/// State-value network.
#[derive(Debug)]
pub struct Critic<S> {
    store: ParamStore<S>,
    net: Mlp,
    obs_dim: usize,
}

impl<S: Scalar> Critic<S> {
    pub fn new(obs_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let net = Mlp::init(&mut store, "critic", obs_dim, &[hidden_dim, hidden_dim], 1, rng);
        Self {
            store,
            net,
            obs_dim,
        }
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn value_node(&self, g: &mut Graph<S>, obs: Node, bind: Bind) -> Node {
        self.net.forward(g, &self.store, obs, bind)
    }

    pub fn value(&self, obs: &[S]) -> S {
        assert_eq!(obs.len(), self.obs_dim);
        let mut g = Graph::new();
        let o = g.constant(Tensor::row_vector(obs));
        let v = self.value_node(&mut g, o, Bind::Frozen);
        g.value(v).item()
    }

    fn clone_detached(&self) -> Self {
        Self {
            store: self.store.clone_detached(),
            net: self.net.clone(),
            obs_dim: self.obs_dim,
        }
    }
}

/// One agent: actor, live critic, EMA critic, and their optimizers.
#[derive(Debug)]
pub struct ActorCritic<S> {
    pub actor: Actor<S>,
    pub critic: Critic<S>,
    pub critic_ema: Critic<S>,
    pub cfg: AgentConfig,
    pub(crate) actor_adam: Adam<S>,
    pub(crate) critic_adam: Adam<S>,
}

impl<S: Scalar> ActorCritic<S> {
    pub fn new(
        obs_dim: usize,
        space: ActionSpace<S>,
        cfg: AgentConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, AgentError> {
        cfg.validate()?;
        let actor = Actor::new(obs_dim, space, cfg.hidden_dim, rng);
        let critic = Critic::new(obs_dim, cfg.hidden_dim, rng);
        let critic_ema = critic.clone_detached();
        let actor_adam = Adam::new(actor.store(), cfg.actor_lr, Some(100.0));
        let critic_adam = Adam::new(critic.store(), cfg.critic_lr, Some(100.0));
        Ok(Self {
            actor,
            critic,
            critic_ema,
            cfg,
            actor_adam,
            critic_adam,
        })
    }

    /// Epsilon-greedy action in model-input representation.
    pub fn sample_action(
        &self,
        obs: &[S],
        epsilon: f64,
        mode: SampleMode,
        rng: &mut impl Rng,
    ) -> Result<Vec<S>, AgentError> {
        self.actor.act(obs, epsilon, mode, rng)
    }

    /// Pull the EMA critic toward the live critic.
    pub fn update_critic_ema(&mut self) {
        let rate = S::of_f64(self.cfg.ema_rate);
        self.critic_ema
            .store_mut()
            .ema_update_from(self.critic.store(), rate)
            .expect("EMA critic is congruent by construction");
    }
}
