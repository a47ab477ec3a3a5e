//! The orchestrator: per-level grounding, the hierarchical acting loop
//! (top-level RMA proposes, GSAs cascade goals downward under fixed action
//! budgets), level selection during warm-up, and the joint training
//! iteration over all model and agent levels.

mod checkpoint;
mod replay;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use replay::ReplayBuffer;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::{
    abstract_with_states, AbstractionError, ActionAbstractor, ActionKMeans, ActionVae,
    KMeansConfig, ProjectionConfig, RandomProjection, VaeConfig,
};
use crate::agents::{
    imagine_train_gsa, imagine_train_rma, ActionSpace, ActorCritic, AgentConfig, AgentError,
    AgentMetrics, GsaRolloutSpec, GsaTerminalMap, ImaginedBatch, RssmDynamics,
};
use crate::envs::{EnvError, EnvSpec, Environment};
use crate::goals::{GoalSpace, Similarity};
use crate::math::{Adam, Tensor};
use crate::rssm::{ElboComponents, ModelState, Rssm, RssmConfig, RssmError, SampleMode};
use crate::scalar::Scalar;
use crate::trajectory::{SeqBatch, Trajectory};

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("invalid hierarchy spec: {0}")]
    Spec(String),
    #[error("model level {level}: {source}")]
    Model { level: usize, source: RssmError },
    #[error("abstractor level {level}: {source}")]
    Abstractor {
        level: usize,
        source: AbstractionError,
    },
    #[error("{kind} level {level}: {source}")]
    Agent {
        level: usize,
        kind: &'static str,
        source: AgentError,
    },
    #[error("environment: {0}")]
    Env(#[from] EnvError),
    #[error("replay buffer is empty")]
    EmptyReplay,
}

/// Which action abstraction scheme higher levels use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Vae,
    Kmeans,
    Projection,
}

/// Abstraction hyperparameters shared by all abstract levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbstractionSettings {
    pub action_mode: ActionMode,
    pub vae_beta: f64,
    pub vae_sigma_prior: f64,
    pub vae_hidden_dim: usize,
    pub vae_learn_rate: f64,
    pub kmeans_centroids: usize,
    pub kmeans_rho: f64,
    pub projection_seed: u64,
}

impl Default for AbstractionSettings {
    fn default() -> Self {
        Self {
            action_mode: ActionMode::Vae,
            vae_beta: 0.01,
            vae_sigma_prior: 0.1,
            vae_hidden_dim: 128,
            vae_learn_rate: 1e-3,
            kmeans_centroids: 32,
            kmeans_rho: 0.05,
            projection_seed: 7,
        }
    }
}

/// Goal comparison configuration for the GSAs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalSettings {
    pub similarity: Similarity,
    pub space: GoalSpace,
}

impl Default for GoalSettings {
    fn default() -> Self {
        Self {
            similarity: Similarity::Mse,
            space: GoalSpace::DecodedObs,
        }
    }
}

/// Level structure: strides and abstract action widths for levels 1 and up.
/// Level 0 always has stride 1 and the environment's native actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchySpec {
    pub strides: Vec<usize>,
    pub abstract_action_dims: Vec<usize>,
}

impl HierarchySpec {
    pub fn flat() -> Self {
        Self {
            strides: Vec::new(),
            abstract_action_dims: Vec::new(),
        }
    }

    pub fn num_levels(&self) -> usize {
        self.strides.len() + 1
    }

    pub fn top_level(&self) -> usize {
        self.strides.len()
    }

    /// Environment steps consumed by one level-l step.
    pub fn cumulative_stride(&self, level: usize) -> usize {
        self.strides[..level].iter().product()
    }

    pub fn validate(&self, episode_cap: usize) -> Result<(), HierarchyError> {
        if self.abstract_action_dims.len() != self.strides.len() {
            return Err(HierarchyError::Spec(
                "strides and abstract_action_dims must have equal length".into(),
            ));
        }
        if self.strides.iter().any(|&k| k < 2) {
            return Err(HierarchyError::Spec("strides must be >= 2".into()));
        }
        if self.abstract_action_dims.iter().any(|&d| d == 0) {
            return Err(HierarchyError::Spec(
                "abstract action dims must be positive".into(),
            ));
        }
        if self.num_levels() > 1 && self.stride_product() > episode_cap {
            return Err(HierarchyError::Spec(format!(
                "product of strides {} exceeds the episode cap {episode_cap}",
                self.stride_product()
            )));
        }
        Ok(())
    }

    /// Environment steps per full top-level decision cycle.
    pub fn stride_product(&self) -> usize {
        self.strides.iter().product()
    }
}

/// The highest level whose cumulative stride fits in the steps collected so
/// far; lower levels act directly while higher models cannot be grounded yet.
pub fn select_acting_level(env_steps_so_far: usize, spec: &HierarchySpec) -> usize {
    let mut level = 0;
    for l in 1..spec.num_levels() {
        if env_steps_so_far >= spec.cumulative_stride(l) {
            level = l;
        }
    }
    level
}

/// Knobs of one training iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub batch_segments: usize,
    pub segment_len: usize,
    pub model_updates: usize,
    pub agent_updates: usize,
    pub imagination_starts: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_segments: 16,
            segment_len: 32,
            model_updates: 2,
            agent_updates: 2,
            imagination_starts: 48,
        }
    }
}

/// Grounded view of one trajectory across all levels.
pub struct Grounded<S> {
    /// Level trajectories: level 0 holds the raw environment-step rows,
    /// higher levels the abstracted rows over complete chunks only.
    pub level_trajs: Vec<Trajectory<S>>,
    /// Closed-loop states aligned with each level trajectory's rows.
    pub level_states: Vec<Vec<ModelState<S>>>,
    /// Level-0 state sequence including the reset row, for acting.
    pub level0_full: Vec<ModelState<S>>,
}

/// One collected episode plus acting bookkeeping.
#[derive(Clone, Debug)]
pub struct EpisodeOutcome<S> {
    pub traj: Trajectory<S>,
    /// Environment-step index at each acting-level decision.
    pub decision_steps: Vec<usize>,
    /// Acting level chosen at each decision.
    pub decision_levels: Vec<usize>,
}

/// Metrics of one `train_iteration`.
#[derive(Clone, Debug)]
pub struct IterationMetrics<S> {
    pub model: Vec<ElboComponents>,
    pub vae_recon: Vec<Option<f64>>,
    pub rma: Vec<AgentMetrics>,
    pub gsa: Vec<AgentMetrics>,
    /// Last imagined RMA batch per level, for exploitation diagnostics.
    pub rma_batches: Vec<ImaginedBatch<S>>,
}

/// The full stack: world models, EMA copies, agents, and abstractors.
pub struct Hierarchy<S: Scalar> {
    pub spec: HierarchySpec,
    pub env_spec: EnvSpec<S>,
    pub models: Vec<Rssm<S>>,
    pub model_emas: Vec<Rssm<S>>,
    pub rmas: Vec<ActorCritic<S>>,
    pub gsas: Vec<ActorCritic<S>>,
    pub abstractors: Vec<ActionAbstractor<S>>,
    pub goal_settings: GoalSettings,
    pub terminal_map: GsaTerminalMap,
    model_adams: Vec<Adam<S>>,
    abstractor_adams: Vec<Option<Adam<S>>>,
    abstraction_settings: AbstractionSettings,
}

impl<S: Scalar> Hierarchy<S> {
    /// Wire up a stack from per-level configs. `model_cfgs` and `agent_cfgs`
    /// must hold one entry per level; x/a widths inside `model_cfgs` are
    /// overwritten from the environment and hierarchy geometry.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        env_spec: EnvSpec<S>,
        spec: HierarchySpec,
        mut model_cfgs: Vec<RssmConfig>,
        agent_cfgs: Vec<AgentConfig>,
        abstraction: AbstractionSettings,
        goal_settings: GoalSettings,
        terminal_map: GsaTerminalMap,
        rng: &mut impl Rng,
    ) -> Result<Self, HierarchyError> {
        spec.validate(env_spec.max_steps)?;
        let levels = spec.num_levels();
        if model_cfgs.len() != levels || agent_cfgs.len() != levels {
            return Err(HierarchyError::Spec(format!(
                "need {levels} model and agent configs, got {} and {}",
                model_cfgs.len(),
                agent_cfgs.len()
            )));
        }
        terminal_map
            .validate()
            .map_err(|source| HierarchyError::Agent {
                level: 0,
                kind: "gsa",
                source,
            })?;

        // resolve per-level x/a widths from the geometry
        let mut abstractors = Vec::new();
        let mut abstractor_adams = Vec::new();
        for l in 0..levels {
            if l == 0 {
                model_cfgs[0].x_dim = env_spec.obs_dim;
                model_cfgs[0].a_dim = env_spec.act_dim;
            } else {
                let lower_s = model_cfgs[l - 1].s_dim();
                let in_dim = spec.strides[l - 1] * model_cfgs[l - 1].a_dim;
                let abstractor = match abstraction.action_mode {
                    ActionMode::Vae => {
                        let vae = ActionVae::new(
                            VaeConfig {
                                in_dim,
                                latent_dim: spec.abstract_action_dims[l - 1],
                                hidden_dim: abstraction.vae_hidden_dim,
                                beta: abstraction.vae_beta,
                                sigma_prior: abstraction.vae_sigma_prior,
                                learn_rate: abstraction.vae_learn_rate,
                            },
                            rng,
                        )
                        .map_err(|source| HierarchyError::Abstractor { level: l, source })?;
                        ActionAbstractor::Vae(vae)
                    }
                    ActionMode::Kmeans => ActionAbstractor::KMeans(
                        ActionKMeans::new(KMeansConfig {
                            in_dim,
                            n_centroids: abstraction.kmeans_centroids,
                            rho: abstraction.kmeans_rho,
                        })
                        .map_err(|source| HierarchyError::Abstractor { level: l, source })?,
                    ),
                    ActionMode::Projection => {
                        ActionAbstractor::Projection(RandomProjection::new(ProjectionConfig {
                            in_dim,
                            out_dim: spec.abstract_action_dims[l - 1],
                            seed: abstraction.projection_seed.wrapping_add(l as u64),
                        }))
                    }
                };
                model_cfgs[l].x_dim = lower_s;
                model_cfgs[l].a_dim = abstractor.action_dim();
                let adam = match &abstractor {
                    ActionAbstractor::Vae(v) => {
                        Some(Adam::new(v.store(), abstraction.vae_learn_rate, Some(100.0)))
                    }
                    _ => None,
                };
                abstractors.push(abstractor);
                abstractor_adams.push(adam);
            }
        }

        let mut models = Vec::with_capacity(levels);
        let mut model_emas = Vec::with_capacity(levels);
        let mut model_adams = Vec::with_capacity(levels);
        for (l, cfg) in model_cfgs.iter().enumerate() {
            let model = Rssm::new(cfg.clone(), rng)
                .map_err(|source| HierarchyError::Model { level: l, source })?;
            model_emas.push(model.clone_model());
            model_adams.push(Adam::new(model.store(), cfg.learn_rate, Some(100.0)));
            models.push(model);
        }

        let mut rmas = Vec::with_capacity(levels);
        for l in 0..levels {
            let space = if l == 0 {
                ActionSpace::Box {
                    low: env_spec.act_low.clone(),
                    high: env_spec.act_high.clone(),
                }
            } else {
                match &abstractors[l - 1] {
                    ActionAbstractor::KMeans(k) => ActionSpace::Discrete {
                        n: k.config().n_centroids,
                    },
                    _ => ActionSpace::Box {
                        low: vec![-S::one(); model_cfgs[l].a_dim],
                        high: vec![S::one(); model_cfgs[l].a_dim],
                    },
                }
            };
            let agent = ActorCritic::new(model_cfgs[l].s_dim(), space, agent_cfgs[l].clone(), rng)
                .map_err(|source| HierarchyError::Agent {
                    level: l,
                    kind: "rma",
                    source,
                })?;
            rmas.push(agent);
        }

        let mut gsas = Vec::with_capacity(levels.saturating_sub(1));
        for l in 0..levels.saturating_sub(1) {
            let space = if l == 0 {
                ActionSpace::Box {
                    low: env_spec.act_low.clone(),
                    high: env_spec.act_high.clone(),
                }
            } else {
                match &abstractors[l - 1] {
                    ActionAbstractor::KMeans(k) => ActionSpace::Discrete {
                        n: k.config().n_centroids,
                    },
                    _ => ActionSpace::Box {
                        low: vec![-S::one(); model_cfgs[l].a_dim],
                        high: vec![S::one(); model_cfgs[l].a_dim],
                    },
                }
            };
            let agent = ActorCritic::new(
                2 * model_cfgs[l].s_dim(),
                space,
                agent_cfgs[l].clone(),
                rng,
            )
            .map_err(|source| HierarchyError::Agent {
                level: l,
                kind: "gsa",
                source,
            })?;
            gsas.push(agent);
        }

        Ok(Self {
            spec,
            env_spec,
            models,
            model_emas,
            rmas,
            gsas,
            abstractors,
            goal_settings,
            terminal_map,
            model_adams,
            abstractor_adams,
            abstraction_settings: abstraction,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.spec.num_levels()
    }

    pub fn abstraction_settings(&self) -> &AbstractionSettings {
        &self.abstraction_settings
    }

    // ------------------------------------------------------------------
    // Grounding
    // ------------------------------------------------------------------

    /// Closed-loop pass of every level over one episode trajectory (mean
    /// mode). Levels whose stride exceeds the available steps receive no
    /// grounded states.
    pub fn ground(
        &self,
        traj: &Trajectory<S>,
        rng: &mut impl Rng,
    ) -> Result<Grounded<S>, HierarchyError> {
        let levels = self.num_levels();
        let batch = SeqBatch::from_trajectories(&[traj]);
        let level0_full = self.models[0]
            .observe_batch(&batch, SampleMode::Mean, rng)
            .into_iter()
            .next()
            .expect("single trajectory");

        let mut level_trajs = Vec::with_capacity(levels);
        let mut level_states = Vec::with_capacity(levels);
        // level 0 rows: environment steps only (the reset row grounds state
        // but is not part of the abstracted trajectory)
        let env_rows = traj.len().saturating_sub(1);
        level_trajs.push(traj.segment(1, env_rows));
        level_states.push(level0_full[1..].to_vec());

        for l in 1..levels {
            let k = self.spec.strides[l - 1];
            let lower_len = level_trajs[l - 1].len();
            let complete = lower_len / k;
            if complete == 0 {
                level_trajs.push(Trajectory::new());
                level_states.push(Vec::new());
                continue;
            }
            let lower_traj = level_trajs[l - 1].segment(0, complete * k);
            let lower_states = &level_states[l - 1][..complete * k];
            let level_traj = abstract_with_states(
                &lower_traj,
                lower_states,
                k,
                &self.abstractors[l - 1],
                SampleMode::Mean,
                rng,
            )
            .map_err(|source| HierarchyError::Abstractor { level: l, source })?;
            let level_batch = SeqBatch::from_trajectories(&[&level_traj]);
            let states = self.models[l]
                .observe_batch(&level_batch, SampleMode::Mean, rng)
                .into_iter()
                .next()
                .expect("single trajectory");
            level_trajs.push(level_traj);
            level_states.push(states);
        }

        Ok(Grounded {
            level_trajs,
            level_states,
            level0_full,
        })
    }

    // ------------------------------------------------------------------
    // Acting
    // ------------------------------------------------------------------

    /// Run one episode: the acting level's RMA proposes abstract actions,
    /// GSAs cascade decoded goals downward, level 0 emits primitive actions.
    /// Returns the collected ground-truth trajectory.
    #[allow(clippy::too_many_arguments)]
    pub fn act_episode(
        &self,
        env: &mut dyn Environment<S>,
        episode_seed: u64,
        env_steps_before: usize,
        epsilon: f64,
        mode: SampleMode,
        rng: &mut impl Rng,
    ) -> Result<EpisodeOutcome<S>, HierarchyError> {
        let obs0 = env.reset(episode_seed);
        let act_dim = self.env_spec.act_dim;
        let mut traj = Trajectory::from_reset(obs0.clone(), act_dim);
        let mut decision_steps = Vec::new();
        let mut decision_levels = Vec::new();

        // level-0 state tracks the episode incrementally
        let zero_action = vec![S::zero(); act_dim];
        let (mut s0, _, _) = self.models[0]
            .step_closed(
                &self.models[0].initial_state(),
                &zero_action,
                &obs0,
                SampleMode::Mean,
                rng,
            )
            .map_err(|source| HierarchyError::Model { level: 0, source })?;
        let mut done = false;

        while !done {
            let steps_so_far = env_steps_before + traj.env_steps();
            let acting_level = select_acting_level(steps_so_far, &self.spec);
            decision_steps.push(traj.env_steps());
            decision_levels.push(acting_level);
            if acting_level == 0 {
                // warm-up phase: the level-0 RMA acts directly
                let action = self.rmas[0]
                    .sample_action(&s0.s(), epsilon, mode, rng)
                    .map_err(|source| HierarchyError::Agent {
                        level: 0,
                        kind: "rma",
                        source,
                    })?;
                done = self.level0_step(env, &action, &mut traj, &mut s0, rng)?;
                continue;
            }

            // re-ground all levels on the episode so far, then let the top
            // RMA decide once and spend the full downstream budget
            let grounded = self.ground(&traj, rng)?;
            s0 = grounded.level0_full.last().cloned().unwrap_or(s0);
            let s_top = grounded.level_states[acting_level]
                .last()
                .cloned()
                .unwrap_or_else(|| self.models[acting_level].initial_state());

            let action = self.rmas[acting_level]
                .sample_action(&s_top.s(), epsilon, mode, rng)
                .map_err(|source| HierarchyError::Agent {
                    level: acting_level,
                    kind: "rma",
                    source,
                })?;
            let (s_next, _) = self.models[acting_level]
                .step_open(&s_top, &action, SampleMode::Mean, rng)
                .map_err(|source| HierarchyError::Model {
                    level: acting_level,
                    source,
                })?;
            let goal = self.models[acting_level].decode(&s_next).x_mean;

            // seed lower-level states from the grounding
            let mut level_states: Vec<ModelState<S>> = (0..acting_level)
                .map(|l| {
                    grounded.level_states[l]
                        .last()
                        .cloned()
                        .unwrap_or_else(|| self.models[l].initial_state())
                })
                .collect();

            done = self.run_goal_budget(
                env,
                acting_level - 1,
                &goal,
                &mut traj,
                &mut s0,
                &mut level_states,
                epsilon,
                mode,
                rng,
            )?;
        }
        Ok(EpisodeOutcome {
            traj,
            decision_steps,
            decision_levels,
        })
    }

    /// Spend level `j`'s action budget navigating toward `goal`.
    #[allow(clippy::too_many_arguments)]
    fn run_goal_budget(
        &self,
        env: &mut dyn Environment<S>,
        j: usize,
        goal: &[S],
        traj: &mut Trajectory<S>,
        s0: &mut ModelState<S>,
        level_states: &mut Vec<ModelState<S>>,
        epsilon: f64,
        mode: SampleMode,
        rng: &mut impl Rng,
    ) -> Result<bool, HierarchyError> {
        let budget = self.spec.strides[j];
        for _ in 0..budget {
            // relative goal recomputed from the current state every step
            let s_j = if j == 0 {
                s0.clone()
            } else {
                level_states[j].clone()
            };
            let mut obs = s_j.s();
            let rel: Vec<S> = obs.iter().zip(goal).map(|(&a, &b)| a - b).collect();
            obs.extend(rel);
            let action = self.gsas[j]
                .sample_action(&obs, epsilon, mode, rng)
                .map_err(|source| HierarchyError::Agent {
                    level: j,
                    kind: "gsa",
                    source,
                })?;

            if j == 0 {
                let done = self.level0_step(env, &action, traj, s0, rng)?;
                if done {
                    return Ok(true);
                }
            } else {
                let (s_next, _) = self.models[j]
                    .step_open(&s_j, &action, SampleMode::Mean, rng)
                    .map_err(|source| HierarchyError::Model { level: j, source })?;
                let goal_below = self.models[j].decode(&s_next).x_mean;
                level_states[j] = s_next;
                let done = self.run_goal_budget(
                    env,
                    j - 1,
                    &goal_below,
                    traj,
                    s0,
                    level_states,
                    epsilon,
                    mode,
                    rng,
                )?;
                if done {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }

    /// One primitive environment step plus the level-0 closed-loop update.
    fn level0_step(
        &self,
        env: &mut dyn Environment<S>,
        action: &[S],
        traj: &mut Trajectory<S>,
        s0: &mut ModelState<S>,
        rng: &mut impl Rng,
    ) -> Result<bool, HierarchyError> {
        let result = env.step(action)?;
        traj.push(
            result.observation.clone(),
            action.to_vec(),
            result.reward,
            if result.terminal { S::one() } else { S::zero() },
            true,
        );
        let (next, _, _) = self.models[0]
            .step_closed(s0, action, &result.observation, SampleMode::Mean, rng)
            .map_err(|source| HierarchyError::Model { level: 0, source })?;
        *s0 = next;
        Ok(result.terminal)
    }

    // ------------------------------------------------------------------
    // Training
    // ------------------------------------------------------------------

    /// One joint training iteration: world models bottom-up with fresh
    /// abstracted datasets, then every RMA and GSA by imagination, then all
    /// EMA copies. All levels train in the same iteration.
    pub fn train_iteration(
        &mut self,
        replay: &ReplayBuffer<S>,
        settings: &TrainSettings,
        rng: &mut impl Rng,
    ) -> Result<IterationMetrics<S>, HierarchyError> {
        if replay.is_empty() {
            return Err(HierarchyError::EmptyReplay);
        }
        let levels = self.num_levels();
        let mut model_metrics: Vec<Vec<ElboComponents>> = vec![Vec::new(); levels];
        let mut vae_metrics: Vec<Vec<f64>> = vec![Vec::new(); levels.saturating_sub(1)];
        let mut last_states: Vec<Vec<Vec<ModelState<S>>>> = vec![Vec::new(); levels];
        let mut last_valid: Vec<Vec<usize>> = vec![Vec::new(); levels];

        for _ in 0..settings.model_updates.max(1) {
            let segments =
                replay.sample_segments(settings.batch_segments, settings.segment_len, rng);
            let refs: Vec<&Trajectory<S>> = segments.iter().collect();
            let batch = SeqBatch::from_trajectories(&refs);
            let comps = self.models[0]
                .train_elbo(&batch, rng, &mut self.model_adams[0])
                .map_err(|source| HierarchyError::Model { level: 0, source })?;
            model_metrics[0].push(comps);

            // grounding with the freshly updated model
            let states0 = self.models[0].observe_batch(&batch, SampleMode::Mean, rng);
            last_states[0] = states0;
            last_valid[0] = segments.iter().map(Trajectory::valid_len).collect();

            let mut lower_trajs = segments;
            for l in 1..levels {
                let k = self.spec.strides[l - 1];

                // abstractor training on this batch's action chunks
                let chunks = action_chunks(&lower_trajs, k);
                if !chunks.is_empty() {
                    let chunk_batch = Tensor::from_rows(&chunks);
                    match &mut self.abstractors[l - 1] {
                        ActionAbstractor::Vae(vae) => {
                            let adam = self.abstractor_adams[l - 1]
                                .as_mut()
                                .expect("vae has an optimizer");
                            let m = vae
                                .train_step(&chunk_batch, rng, adam)
                                .map_err(|source| HierarchyError::Abstractor { level: l, source })?;
                            vae_metrics[l - 1].push(m.recon);
                        }
                        ActionAbstractor::KMeans(km) => {
                            if !km.is_initialised() {
                                km.init_from_batch(&chunk_batch, rng).map_err(|source| {
                                    HierarchyError::Abstractor { level: l, source }
                                })?;
                            }
                            km.update(&chunk_batch).map_err(|source| {
                                HierarchyError::Abstractor { level: l, source }
                            })?;
                        }
                        ActionAbstractor::Projection(_) => {}
                    }
                }

                // regenerate the level dataset fresh (posterior-sampled
                // abstract actions give the model its local action jitter)
                let mut level_trajs = Vec::with_capacity(lower_trajs.len());
                for (traj, states) in lower_trajs.iter().zip(&last_states[l - 1]) {
                    let lt = abstract_with_states(
                        traj,
                        states,
                        k,
                        &self.abstractors[l - 1],
                        SampleMode::Sample,
                        rng,
                    )
                    .map_err(|source| HierarchyError::Abstractor { level: l, source })?;
                    level_trajs.push(lt);
                }
                let level_refs: Vec<&Trajectory<S>> = level_trajs.iter().collect();
                let level_batch = SeqBatch::from_trajectories(&level_refs);
                let comps = self.models[l]
                    .train_elbo(&level_batch, rng, &mut self.model_adams[l])
                    .map_err(|source| HierarchyError::Model { level: l, source })?;
                model_metrics[l].push(comps);

                last_states[l] = self.models[l].observe_batch(&level_batch, SampleMode::Mean, rng);
                last_valid[l] = level_trajs.iter().map(Trajectory::valid_len).collect();
                lower_trajs = level_trajs;
            }
        }

        // EMA world models follow the live models
        for l in 0..levels {
            let rate = S::of_f64(self.models[l].config().ema_rate);
            crate::rssm::ema_update(&self.models[l], &mut self.model_emas[l], rate)
                .expect("EMA models are congruent by construction");
        }

        // agent updates on the freshest grounded states
        let mut rma_metrics: Vec<Option<AgentMetrics>> = (0..levels).map(|_| None).collect();
        let mut gsa_metrics: Vec<Option<AgentMetrics>> =
            (0..levels.saturating_sub(1)).map(|_| None).collect();
        let mut rma_batches: Vec<Option<ImaginedBatch<S>>> = (0..levels).map(|_| None).collect();

        for _ in 0..settings.agent_updates.max(1) {
            for l in 0..levels {
                if last_states[l].iter().all(Vec::is_empty) {
                    continue;
                }
                let starts = sample_start_states(
                    &last_states[l],
                    &last_valid[l],
                    settings.imagination_starts,
                    rng,
                );
                let Some(starts) = starts else { continue };
                let dynamics = RssmDynamics::new(&self.models[l], &self.model_emas[l])
                    .map_err(|source| HierarchyError::Agent {
                        level: l,
                        kind: "rma",
                        source,
                    })?;
                let (m, batch) = imagine_train_rma(&dynamics, &mut self.rmas[l], &starts, rng)
                    .map_err(|source| HierarchyError::Agent {
                        level: l,
                        kind: "rma",
                        source,
                    })?;
                rma_metrics[l] = Some(m);
                rma_batches[l] = Some(batch);

                // GSAs exist on all non-top levels
                if l < self.gsas.len() {
                    let delta_max = self.spec.strides[l];
                    let pairs = sample_goal_pairs(
                        &last_states[l],
                        &last_valid[l],
                        settings.imagination_starts,
                        delta_max,
                        rng,
                    );
                    if let Some((starts, goals)) = pairs {
                        let cascade: Vec<&Rssm<S>> = self.models[..=l].iter().collect();
                        let spec = GsaRolloutSpec {
                            similarity: self.goal_settings.similarity,
                            space: self.goal_settings.space,
                            terminal_map: &self.terminal_map,
                            cascade: &cascade,
                        };
                        let (m, _) = imagine_train_gsa(
                            &dynamics,
                            &mut self.gsas[l],
                            &starts,
                            &goals,
                            &spec,
                            rng,
                        )
                        .map_err(|source| HierarchyError::Agent {
                            level: l,
                            kind: "gsa",
                            source,
                        })?;
                        gsa_metrics[l] = Some(m);
                    }
                }
            }
        }

        Ok(IterationMetrics {
            model: model_metrics
                .into_iter()
                .map(|v| average_elbo(&v))
                .collect(),
            vae_recon: vae_metrics
                .into_iter()
                .map(|v| {
                    if v.is_empty() {
                        None
                    } else {
                        Some(v.iter().sum::<f64>() / v.len() as f64)
                    }
                })
                .collect(),
            rma: rma_metrics.into_iter().flatten().collect(),
            gsa: gsa_metrics.into_iter().flatten().collect(),
            rma_batches: rma_batches.into_iter().flatten().collect(),
        })
    }
}

/// Flattened action chunks over all segments, zero-padded where masked.
fn action_chunks<S: Scalar>(trajs: &[Trajectory<S>], k: usize) -> Vec<Vec<S>> {
    let mut out = Vec::new();
    for traj in trajs {
        if traj.is_empty() {
            continue;
        }
        let a_dim = traj.a_dim();
        let n_chunks = traj.len().div_ceil(k);
        for i in 0..n_chunks {
            let lo = i * k;
            let hi = ((i + 1) * k).min(traj.len());
            if !traj.mask[lo..hi].iter().any(|&m| m) {
                continue;
            }
            let mut flat = vec![S::zero(); k * a_dim];
            for (j, row) in (lo..hi).enumerate() {
                if traj.mask[row] {
                    flat[j * a_dim..(j + 1) * a_dim].copy_from_slice(&traj.prev_actions[row]);
                }
            }
            out.push(flat);
        }
    }
    out
}

fn collect_valid_indices(valid: &[usize]) -> Vec<(usize, usize)> {
    let mut idx = Vec::new();
    for (b, &v) in valid.iter().enumerate() {
        for t in 0..v {
            idx.push((b, t));
        }
    }
    idx
}

fn sample_start_states<S: Scalar>(
    states: &[Vec<ModelState<S>>],
    valid: &[usize],
    n: usize,
    rng: &mut impl Rng,
) -> Option<Tensor<S>> {
    let idx = collect_valid_indices(valid);
    if idx.is_empty() {
        return None;
    }
    let rows: Vec<Vec<S>> = (0..n)
        .map(|_| {
            let (b, t) = idx[rng.gen_range(0..idx.len())];
            states[b][t].s()
        })
        .collect();
    Some(Tensor::from_rows(&rows))
}

/// (start, goal) state pairs `(t, t + delta)` from the same segment, with
/// `delta` drawn from `[1, delta_max]`; segments shorter than the drawn
/// offset are resampled.
fn sample_goal_pairs<S: Scalar>(
    states: &[Vec<ModelState<S>>],
    valid: &[usize],
    n: usize,
    delta_max: usize,
    rng: &mut impl Rng,
) -> Option<(Tensor<S>, Tensor<S>)> {
    let candidates: Vec<usize> = valid
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= 2)
        .map(|(b, _)| b)
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let mut starts = Vec::with_capacity(n);
    let mut goals = Vec::with_capacity(n);
    for _ in 0..n {
        // resample until the segment can hold the offset
        let (b, t, delta) = loop {
            let b = candidates[rng.gen_range(0..candidates.len())];
            let v = valid[b];
            let delta = 1 + rng.gen_range(0..delta_max);
            if v >= delta + 1 {
                let t = rng.gen_range(0..v - delta);
                break (b, t, delta);
            }
        };
        starts.push(states[b][t].s());
        goals.push(states[b][t + delta].s());
    }
    Some((Tensor::from_rows(&starts), Tensor::from_rows(&goals)))
}

fn average_elbo(v: &[ElboComponents]) -> ElboComponents {
    if v.is_empty() {
        return ElboComponents {
            recon_x: 0.0,
            recon_r: 0.0,
            recon_d: 0.0,
            kl: 0.0,
            total: 0.0,
        };
    }
    let n = v.len() as f64;
    ElboComponents {
        recon_x: v.iter().map(|c| c.recon_x).sum::<f64>() / n,
        recon_r: v.iter().map(|c| c.recon_r).sum::<f64>() / n,
        recon_d: v.iter().map(|c| c.recon_d).sum::<f64>() / n,
        kl: v.iter().map(|c| c.kl).sum::<f64>() / n,
        total: v.iter().map(|c| c.total).sum::<f64>() / n,
    }
}
