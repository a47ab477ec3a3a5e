//! One level of the world-model stack: a recurrent state-space model with a
//! deterministic recurrent core, Gaussian prior/posterior stochastic state,
//! and observation/goal, reward, and terminal decoder heads, trained by the
//! evidence lower bound.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::nets::{
    bernoulli_nll_logits, gaussian_from_head, gaussian_kl, gaussian_nll_unit, gaussian_sample,
};
use crate::math::{Adam, Bind, GaussianNodes, Graph, GruCell, Linear, Mlp, Node, ParamStore, Tensor};
use crate::persist::{load_json, save_json, PersistError, Sidecar};
use crate::scalar::Scalar;
use crate::trajectory::SeqBatch;

/// Softplus floor keeping prior/posterior stddevs away from zero.
pub const MIN_STD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum RssmError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("batch has no valid steps")]
    EmptyMask,
    #[error(
        "non-finite loss (recon_x={recon_x}, recon_r={recon_r}, recon_d={recon_d}, kl={kl})"
    )]
    NonFinite {
        recon_x: f64,
        recon_r: f64,
        recon_d: f64,
        kl: f64,
    },
}

/// Widths and training knobs for one model level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RssmConfig {
    /// Deterministic state width.
    pub h_dim: usize,
    /// Stochastic state width.
    pub z_dim: usize,
    /// Observation-or-goal width.
    pub x_dim: usize,
    /// Action width.
    pub a_dim: usize,
    /// Hidden layer width of the component networks.
    pub hidden_dim: usize,
    /// KL weight in the ELBO.
    pub beta: f64,
    /// KL floor per step (free nats).
    pub free_nats: f64,
    /// Optimizer step size.
    pub learn_rate: f64,
    /// Decay of the EMA model copy used for the novelty bonus.
    pub ema_rate: f64,
}

impl RssmConfig {
    pub fn validate(&self) -> Result<(), RssmError> {
        if self.h_dim == 0 || self.z_dim == 0 || self.x_dim == 0 || self.a_dim == 0 {
            return Err(RssmError::Config("all widths must be positive".into()));
        }
        if self.hidden_dim == 0 {
            return Err(RssmError::Config("hidden_dim must be positive".into()));
        }
        if self.beta < 0.0 {
            return Err(RssmError::Config("beta must be >= 0".into()));
        }
        if self.free_nats < 0.0 {
            return Err(RssmError::Config("free_nats must be >= 0".into()));
        }
        Ok(())
    }

    /// Width of the full model state `s = h (+) z`.
    pub fn s_dim(&self) -> usize {
        self.h_dim + self.z_dim
    }
}

/// Model state: deterministic part, stochastic sample, and their concatenation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState<S> {
    pub h: Vec<S>,
    pub z: Vec<S>,
}

impl<S: Scalar> ModelState<S> {
    pub fn zeros(h_dim: usize, z_dim: usize) -> Self {
        Self {
            h: vec![S::zero(); h_dim],
            z: vec![S::zero(); z_dim],
        }
    }

    /// The full state vector `h (+) z`.
    pub fn s(&self) -> Vec<S> {
        let mut v = Vec::with_capacity(self.h.len() + self.z.len());
        v.extend_from_slice(&self.h);
        v.extend_from_slice(&self.z);
        v
    }

    pub fn s_dim(&self) -> usize {
        self.h.len() + self.z.len()
    }

    pub fn all_finite(&self) -> bool {
        self.h.iter().chain(&self.z).all(|v| v.is_finite())
    }
}

/// Diagonal Gaussian parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams<S> {
    pub mean: Vec<S>,
    pub stddev: Vec<S>,
}

/// Decoded heads of one model state.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedStep<S> {
    pub x_mean: Vec<S>,
    pub r_mean: S,
    pub d_prob: S,
}

/// Whether stochastic states use the distribution mean or a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Mean,
    Sample,
}

/// Loss components of one ELBO evaluation, as masked means per step.
#[derive(Clone, Copy, Debug)]
pub struct ElboComponents {
    pub recon_x: f64,
    pub recon_r: f64,
    pub recon_d: f64,
    pub kl: f64,
    pub total: f64,
}

/// Batched model state inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct StateNodes {
    pub h: Node,
    pub z: Node,
}

impl StateNodes {
    pub fn s<S: Scalar>(self, g: &mut Graph<S>) -> Node {
        g.concat(self.h, self.z)
    }
}

/// One step of a model rollout.
#[derive(Clone, Debug)]
pub struct RolloutStep<S> {
    pub state: ModelState<S>,
    pub prior: GaussianParams<S>,
    pub posterior: Option<GaussianParams<S>>,
    pub decoded: DecodedStep<S>,
}

/// A recurrent state-space model level.
#[derive(Debug)]
pub struct Rssm<S> {
    cfg: RssmConfig,
    store: ParamStore<S>,
    embed: Linear,
    gru: GruCell,
    prior_net: Mlp,
    post_net: Mlp,
    dec_x: Mlp,
    dec_r: Mlp,
    dec_d: Mlp,
}

impl<S: Scalar> Rssm<S> {
    pub fn new(cfg: RssmConfig, rng: &mut impl Rng) -> Result<Self, RssmError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let in_dim = cfg.h_dim + cfg.z_dim + cfg.a_dim;
        let hid = cfg.hidden_dim;
        let embed = Linear::init(&mut store, "embed", in_dim, hid, rng);
        let gru = GruCell::init(&mut store, "gru", hid, cfg.h_dim, rng);
        let prior_net = Mlp::init(&mut store, "prior", cfg.h_dim, &[hid], 2 * cfg.z_dim, rng);
        let post_net = Mlp::init(
            &mut store,
            "posterior",
            cfg.h_dim + cfg.x_dim,
            &[hid],
            2 * cfg.z_dim,
            rng,
        );
        let s_dim = cfg.s_dim();
        let dec_x = Mlp::init(&mut store, "dec_x", s_dim, &[hid], cfg.x_dim, rng);
        let dec_r = Mlp::init(&mut store, "dec_r", s_dim, &[hid], 1, rng);
        let dec_d = Mlp::init(&mut store, "dec_d", s_dim, &[hid], 1, rng);
        Ok(Self {
            cfg,
            store,
            embed,
            gru,
            prior_net,
            post_net,
            dec_x,
            dec_r,
            dec_d,
        })
    }

    pub fn config(&self) -> &RssmConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    /// Structural copy with detached parameters (EMA snapshots).
    pub fn clone_model(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            store: self.store.clone_detached(),
            embed: self.embed.clone(),
            gru: self.gru.clone(),
            prior_net: self.prior_net.clone(),
            post_net: self.post_net.clone(),
            dec_x: self.dec_x.clone(),
            dec_r: self.dec_r.clone(),
            dec_d: self.dec_d.clone(),
        }
    }

    // ------------------------------------------------------------------
    // Graph-level building blocks (shared by training, acting, imagination)
    // ------------------------------------------------------------------

    pub fn initial_nodes(&self, g: &mut Graph<S>, batch: usize) -> StateNodes {
        StateNodes {
            h: g.constant(Tensor::zeros(batch, self.cfg.h_dim)),
            z: g.constant(Tensor::zeros(batch, self.cfg.z_dim)),
        }
    }

    /// Deterministic core: `h_t = f(h_{t-1}, s_{t-1}, a_{t-1})`.
    pub fn core_step(
        &self,
        g: &mut Graph<S>,
        prev: StateNodes,
        action: Node,
        bind: Bind,
    ) -> Node {
        let s_prev = g.concat(prev.h, prev.z);
        let input = g.concat(s_prev, action);
        let e = self.embed.forward(g, &self.store, input, bind);
        let e = g.tanh(e);
        self.gru.forward(g, &self.store, e, prev.h, bind)
    }

    pub fn prior_head(&self, g: &mut Graph<S>, h: Node, bind: Bind) -> GaussianNodes {
        let head = self.prior_net.forward(g, &self.store, h, bind);
        gaussian_from_head(g, head, self.cfg.z_dim, MIN_STD)
    }

    pub fn posterior_head(&self, g: &mut Graph<S>, h: Node, x: Node, bind: Bind) -> GaussianNodes {
        let input = g.concat(h, x);
        let head = self.post_net.forward(g, &self.store, input, bind);
        gaussian_from_head(g, head, self.cfg.z_dim, MIN_STD)
    }

    pub fn decode_x_node(&self, g: &mut Graph<S>, s: Node, bind: Bind) -> Node {
        self.dec_x.forward(g, &self.store, s, bind)
    }

    pub fn decode_r_node(&self, g: &mut Graph<S>, s: Node, bind: Bind) -> Node {
        self.dec_r.forward(g, &self.store, s, bind)
    }

    pub fn decode_d_logit_node(&self, g: &mut Graph<S>, s: Node, bind: Bind) -> Node {
        self.dec_d.forward(g, &self.store, s, bind)
    }

    fn z_from(
        &self,
        g: &mut Graph<S>,
        params: GaussianNodes,
        batch: usize,
        mode: SampleMode,
        rng: &mut impl Rng,
    ) -> Node {
        match mode {
            SampleMode::Mean => params.mean,
            SampleMode::Sample => {
                let noise = g.constant(normal_tensor(batch, self.cfg.z_dim, rng));
                gaussian_sample(g, params, noise)
            }
        }
    }

    // ------------------------------------------------------------------
    // Single-state operations
    // ------------------------------------------------------------------

    /// All-zero initial state (the zero-padded 0th time step).
    pub fn initial_state(&self) -> ModelState<S> {
        ModelState::zeros(self.cfg.h_dim, self.cfg.z_dim)
    }

    fn check_state(&self, state: &ModelState<S>) -> Result<(), RssmError> {
        if state.h.len() != self.cfg.h_dim || state.z.len() != self.cfg.z_dim {
            return Err(RssmError::Shape(format!(
                "state dims ({}, {}) do not match config ({}, {})",
                state.h.len(),
                state.z.len(),
                self.cfg.h_dim,
                self.cfg.z_dim
            )));
        }
        Ok(())
    }

    fn check_len(&self, len: usize, expected: usize, what: &str) -> Result<(), RssmError> {
        if len != expected {
            return Err(RssmError::Shape(format!(
                "{what} has length {len}, expected {expected}"
            )));
        }
        Ok(())
    }

    /// One grounded step: condition the stochastic state on `x`.
    pub fn step_closed(
        &self,
        prev: &ModelState<S>,
        action: &[S],
        x: &[S],
        mode: SampleMode,
        rng: &mut impl Rng,
    ) -> Result<(ModelState<S>, GaussianParams<S>, GaussianParams<S>), RssmError> {
        self.check_state(prev)?;
        self.check_len(action.len(), self.cfg.a_dim, "action")?;
        self.check_len(x.len(), self.cfg.x_dim, "x")?;

        let mut g = Graph::new();
        let prev_nodes = StateNodes {
            h: g.constant(Tensor::row_vector(&prev.h)),
            z: g.constant(Tensor::row_vector(&prev.z)),
        };
        let a = g.constant(Tensor::row_vector(action));
        let xn = g.constant(Tensor::row_vector(x));
        let h = self.core_step(&mut g, prev_nodes, a, Bind::Frozen);
        let prior = self.prior_head(&mut g, h, Bind::Frozen);
        let post = self.posterior_head(&mut g, h, xn, Bind::Frozen);
        let z = self.z_from(&mut g, post, 1, mode, rng);
        let state = ModelState {
            h: g.value(h).row(0).to_vec(),
            z: g.value(z).row(0).to_vec(),
        };
        Ok((
            state,
            gaussian_values(&g, prior),
            gaussian_values(&g, post),
        ))
    }

    /// One imagined step: stochastic state from the learned prior, no `x`.
    pub fn step_open(
        &self,
        prev: &ModelState<S>,
        action: &[S],
        mode: SampleMode,
        rng: &mut impl Rng,
    ) -> Result<(ModelState<S>, GaussianParams<S>), RssmError> {
        self.check_state(prev)?;
        self.check_len(action.len(), self.cfg.a_dim, "action")?;

        let mut g = Graph::new();
        let prev_nodes = StateNodes {
            h: g.constant(Tensor::row_vector(&prev.h)),
            z: g.constant(Tensor::row_vector(&prev.z)),
        };
        let a = g.constant(Tensor::row_vector(action));
        let h = self.core_step(&mut g, prev_nodes, a, Bind::Frozen);
        let prior = self.prior_head(&mut g, h, Bind::Frozen);
        let z = self.z_from(&mut g, prior, 1, mode, rng);
        let state = ModelState {
            h: g.value(h).row(0).to_vec(),
            z: g.value(z).row(0).to_vec(),
        };
        Ok((state, gaussian_values(&g, prior)))
    }

    /// Decode the heads of a raw state vector `s = h (+) z`.
    pub fn decode_vec(&self, s: &[S]) -> Result<DecodedStep<S>, RssmError> {
        self.check_len(s.len(), self.cfg.s_dim(), "state vector")?;
        let mut g = Graph::new();
        let s = g.constant(Tensor::row_vector(s));
        let x = self.decode_x_node(&mut g, s, Bind::Frozen);
        let r = self.decode_r_node(&mut g, s, Bind::Frozen);
        let d = self.decode_d_logit_node(&mut g, s, Bind::Frozen);
        let d = g.sigmoid(d);
        Ok(DecodedStep {
            x_mean: g.value(x).row(0).to_vec(),
            r_mean: g.value(r).item(),
            d_prob: g.value(d).item(),
        })
    }

    /// Decode the observation/goal, reward, and terminal heads of a state.
    pub fn decode(&self, state: &ModelState<S>) -> DecodedStep<S> {
        let mut g = Graph::new();
        let s = g.constant(Tensor::row_vector(&state.s()));
        let x = self.decode_x_node(&mut g, s, Bind::Frozen);
        let r = self.decode_r_node(&mut g, s, Bind::Frozen);
        let d = self.decode_d_logit_node(&mut g, s, Bind::Frozen);
        let d = g.sigmoid(d);
        DecodedStep {
            x_mean: g.value(x).row(0).to_vec(),
            r_mean: g.value(r).item(),
            d_prob: g.value(d).item(),
        }
    }

    // ------------------------------------------------------------------
    // Training
    // ------------------------------------------------------------------

    /// Build the ELBO over a batch. Returns the total node plus components.
    pub fn elbo_graph(
        &self,
        g: &mut Graph<S>,
        batch: &SeqBatch<S>,
        noise: &[Tensor<S>],
        bind: Bind,
    ) -> Result<ElboNodes, RssmError> {
        if batch.x_dim() != self.cfg.x_dim || batch.a_dim() != self.cfg.a_dim {
            return Err(RssmError::Shape(format!(
                "batch dims (x={}, a={}) do not match config (x={}, a={})",
                batch.x_dim(),
                batch.a_dim(),
                self.cfg.x_dim,
                self.cfg.a_dim
            )));
        }
        let n_valid = batch.total_valid();
        if n_valid <= S::zero() {
            return Err(RssmError::EmptyMask);
        }
        assert_eq!(noise.len(), batch.steps, "need one noise tensor per step");

        let b = batch.batch;
        let mut state = self.initial_nodes(g, b);
        let mut acc_total = g.constant(Tensor::zeros(b, 1));
        let mut acc_x = acc_total;
        let mut acc_r = acc_total;
        let mut acc_d = acc_total;
        let mut acc_kl = acc_total;

        let beta = S::of_f64(self.cfg.beta);
        let free_nats = S::of_f64(self.cfg.free_nats);

        for t in 0..batch.steps {
            let a = g.constant(batch.a[t].clone());
            let x = g.constant(batch.x[t].clone());
            let r = g.constant(batch.r[t].clone());
            let d = g.constant(batch.d[t].clone());
            let mask = g.constant(batch.mask[t].clone());

            let h = self.core_step(g, state, a, bind);
            let prior = self.prior_head(g, h, bind);
            let post = self.posterior_head(g, h, x, bind);
            let eps = g.constant(noise[t].clone());
            let z = gaussian_sample(g, post, eps);
            state = StateNodes { h, z };
            let s = state.s(g);

            let x_mean = self.decode_x_node(g, s, bind);
            let nll_x = gaussian_nll_unit(g, x_mean, x);
            let r_mean = self.decode_r_node(g, s, bind);
            let nll_r = gaussian_nll_unit(g, r_mean, r);
            let d_logit = self.decode_d_logit_node(g, s, bind);
            let nll_d = bernoulli_nll_logits(g, d_logit, d);
            let kl = gaussian_kl(g, post, prior);

            let kl_floored = g.max_scalar(kl, free_nats);
            let kl_term = g.scale(kl_floored, beta);
            let recon = g.add(nll_x, nll_r);
            let recon = g.add(recon, nll_d);
            let step_loss = g.add(kl_term, recon);

            let masked = g.mul(step_loss, mask);
            acc_total = g.add(acc_total, masked);
            let mx = g.mul(nll_x, mask);
            acc_x = g.add(acc_x, mx);
            let mr = g.mul(nll_r, mask);
            acc_r = g.add(acc_r, mr);
            let md = g.mul(nll_d, mask);
            acc_d = g.add(acc_d, md);
            let mkl = g.mul(kl, mask);
            acc_kl = g.add(acc_kl, mkl);
        }

        let inv = S::one() / n_valid;
        let total_sum = g.sum_all(acc_total);
        let total = g.scale(total_sum, inv);
        let sx = g.sum_all(acc_x);
        let recon_x = g.scale(sx, inv);
        let sr = g.sum_all(acc_r);
        let recon_r = g.scale(sr, inv);
        let sd = g.sum_all(acc_d);
        let recon_d = g.scale(sd, inv);
        let skl = g.sum_all(acc_kl);
        let kl = g.scale(skl, inv);

        Ok(ElboNodes {
            total,
            recon_x,
            recon_r,
            recon_d,
            kl,
        })
    }

    /// One standard-normal noise tensor per batch step, for the posterior
    /// reparameterisation. Exposed so gradient checks can freeze the noise.
    pub fn elbo_noise(&self, batch: &SeqBatch<S>, rng: &mut impl Rng) -> Vec<Tensor<S>> {
        (0..batch.steps)
            .map(|_| normal_tensor(batch.batch, self.cfg.z_dim, rng))
            .collect()
    }

    /// ELBO loss components of a batch without updating parameters.
    pub fn elbo_loss(
        &self,
        batch: &SeqBatch<S>,
        rng: &mut impl Rng,
    ) -> Result<ElboComponents, RssmError> {
        let noise = self.elbo_noise(batch, rng);
        let mut g = Graph::new();
        let nodes = self.elbo_graph(&mut g, batch, &noise, Bind::Frozen)?;
        let comps = nodes.components(&g);
        comps.check_finite()?;
        Ok(comps)
    }

    /// One gradient step on the ELBO.
    pub fn train_elbo(
        &mut self,
        batch: &SeqBatch<S>,
        rng: &mut impl Rng,
        adam: &mut Adam<S>,
    ) -> Result<ElboComponents, RssmError> {
        let noise = self.elbo_noise(batch, rng);
        let mut g = Graph::new();
        let nodes = self.elbo_graph(&mut g, batch, &noise, Bind::Trainable)?;
        let comps = nodes.components(&g);
        comps.check_finite()?;
        let grads = g.backward(nodes.total);
        let pg = g.param_grads(&grads, &self.store);
        adam.step(&mut self.store, pg);
        Ok(comps)
    }

    /// Closed-loop pass over a batch, returning per-trajectory state sequences.
    pub fn observe_batch(
        &self,
        batch: &SeqBatch<S>,
        mode: SampleMode,
        rng: &mut impl Rng,
    ) -> Vec<Vec<ModelState<S>>> {
        let b = batch.batch;
        let mut g = Graph::new();
        let mut state = self.initial_nodes(&mut g, b);
        let mut out: Vec<Vec<ModelState<S>>> = vec![Vec::with_capacity(batch.steps); b];
        for t in 0..batch.steps {
            let a = g.constant(batch.a[t].clone());
            let x = g.constant(batch.x[t].clone());
            let h = self.core_step(&mut g, state, a, Bind::Frozen);
            let post = self.posterior_head(&mut g, h, x, Bind::Frozen);
            let z = self.z_from(&mut g, post, b, mode, rng);
            state = StateNodes { h, z };
            let hv = g.value(h);
            let zv = g.value(z);
            for r in 0..b {
                out[r].push(ModelState {
                    h: hv.row(r).to_vec(),
                    z: zv.row(r).to_vec(),
                });
            }
        }
        out
    }

    /// Closed-loop warm-up followed by an open-loop continuation.
    ///
    /// Step 0 consumes an implicit zero action; `actions[i]` leads into step
    /// `i + 1`. The first `warmup` steps ground on `init_x`; the remaining
    /// `horizon` steps use the learned prior.
    pub fn rollout(
        &self,
        init_x: &[Vec<S>],
        actions: &[Vec<S>],
        warmup: usize,
        horizon: usize,
        mode: SampleMode,
        rng: &mut impl Rng,
    ) -> Result<Vec<RolloutStep<S>>, RssmError> {
        if warmup < 1 {
            return Err(RssmError::Contract("warmup must be >= 1".into()));
        }
        if init_x.len() < warmup {
            return Err(RssmError::Contract(format!(
                "need {warmup} ground-truth steps, got {}",
                init_x.len()
            )));
        }
        let total = warmup + horizon;
        if actions.len() + 1 < total {
            return Err(RssmError::Contract(format!(
                "need {} actions for warmup {warmup} + horizon {horizon}, got {}",
                total - 1,
                actions.len()
            )));
        }

        let zero_action = vec![S::zero(); self.cfg.a_dim];
        let mut state = self.initial_state();
        let mut out = Vec::with_capacity(total);
        for i in 0..total {
            let action = if i == 0 { &zero_action } else { &actions[i - 1] };
            let (next, prior, posterior) = if i < warmup {
                let (s, prior, post) = self.step_closed(&state, action, &init_x[i], mode, rng)?;
                (s, prior, Some(post))
            } else {
                let (s, prior) = self.step_open(&state, action, mode, rng)?;
                (s, prior, None)
            };
            let decoded = self.decode(&next);
            state = next.clone();
            out.push(RolloutStep {
                state: next,
                prior,
                posterior,
                decoded,
            });
        }
        Ok(out)
    }

    // ------------------------------------------------------------------
    // Persistence
    // ------------------------------------------------------------------

    /// Write `<name>.params.json` and the `<name>.json` config sidecar.
    pub fn save(&self, dir: &Path, name: &str) -> Result<(), PersistError> {
        save_json(&dir.join(format!("{name}.params.json")), &self.store.to_tree())?;
        save_json(&dir.join(format!("{name}.json")), &Sidecar::new(self.cfg.clone()))
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self, PersistError> {
        let sidecar: Sidecar<RssmConfig> = load_json(&dir.join(format!("{name}.json")))?;
        sidecar.check_version()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(sidecar.config, &mut rng)
            .map_err(|e| PersistError::Io(std::io::Error::other(e.to_string())))?;
        let tree = load_json(&dir.join(format!("{name}.params.json")))?;
        model.store.load_tree(&tree)?;
        Ok(model)
    }
}

/// `ema <- rate * ema + (1 - rate) * live` over congruent parameter trees.
pub fn ema_update<S: Scalar>(
    live: &Rssm<S>,
    ema: &mut Rssm<S>,
    rate: S,
) -> Result<(), crate::math::ParamError> {
    ema.store.ema_update_from(&live.store, rate)
}

/// ELBO node bundle.
pub struct ElboNodes {
    pub total: Node,
    pub recon_x: Node,
    pub recon_r: Node,
    pub recon_d: Node,
    pub kl: Node,
}

impl ElboNodes {
    pub fn components<S: Scalar>(&self, g: &Graph<S>) -> ElboComponents {
        ElboComponents {
            recon_x: g.scalar_value(self.recon_x).as_f64(),
            recon_r: g.scalar_value(self.recon_r).as_f64(),
            recon_d: g.scalar_value(self.recon_d).as_f64(),
            kl: g.scalar_value(self.kl).as_f64(),
            total: g.scalar_value(self.total).as_f64(),
        }
    }
}

impl ElboComponents {
    pub fn check_finite(&self) -> Result<(), RssmError> {
        if !self.total.is_finite() {
            return Err(RssmError::NonFinite {
                recon_x: self.recon_x,
                recon_r: self.recon_r,
                recon_d: self.recon_d,
                kl: self.kl,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;

fn gaussian_values<S: Scalar>(g: &Graph<S>, params: GaussianNodes) -> GaussianParams<S> {
    GaussianParams {
        mean: g.value(params.mean).row(0).to_vec(),
        stddev: g.value(params.std).row(0).to_vec(),
    }
}

pub(crate) fn normal_tensor<S: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<S> {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| S::sample_normal(rng)).collect(),
    )
}

