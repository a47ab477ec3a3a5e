//! Checkpoint directory layout: a manifest with the hierarchy spec plus one
//! parameter tree (and config sidecar) per model, agent network, and
//! abstractor.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AbstractionSettings, GoalSettings, Hierarchy, HierarchySpec};
use crate::abstraction::ActionAbstractor;
use crate::agents::{AgentConfig, GsaTerminalMap};
use crate::envs::EnvSpec;
use crate::math::ParamTree;
use crate::persist::{load_json, save_json, PersistError, Sidecar};
use crate::rssm::{Rssm, RssmConfig};
use crate::scalar::Scalar;

/// Everything needed to rebuild the stack, next to the parameter trees.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub hierarchy: HierarchySpec,
    pub model_configs: Vec<RssmConfig>,
    pub agent_configs: Vec<AgentConfig>,
    pub abstraction: AbstractionSettings,
    pub goal: GoalSettings,
    pub terminal_map: GsaTerminalMap,
    pub env_steps: u64,
    pub snapshot_id: String,
}

#[derive(Serialize, Deserialize)]
struct AgentTrees<S> {
    actor: ParamTree<S>,
    critic: ParamTree<S>,
    critic_ema: ParamTree<S>,
}

pub fn save_checkpoint<S: Scalar>(
    h: &Hierarchy<S>,
    dir: &Path,
    env_steps: u64,
    snapshot_id: &str,
) -> Result<(), PersistError> {
    std::fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        hierarchy: h.spec.clone(),
        model_configs: h.models.iter().map(|m| m.config().clone()).collect(),
        agent_configs: h.rmas.iter().map(|a| a.cfg.clone()).collect(),
        abstraction: h.abstraction_settings().clone(),
        goal: h.goal_settings,
        terminal_map: h.terminal_map.clone(),
        env_steps,
        snapshot_id: snapshot_id.to_string(),
    };
    save_json(&dir.join("manifest.json"), &Sidecar::new(manifest))?;

    for (l, model) in h.models.iter().enumerate() {
        model.save(dir, &format!("model_l{l}"))?;
    }
    for (l, model) in h.model_emas.iter().enumerate() {
        model.save(dir, &format!("model_ema_l{l}"))?;
    }
    for (l, agent) in h.rmas.iter().enumerate() {
        save_agent(agent, dir, &format!("rma_l{l}"))?;
    }
    for (l, agent) in h.gsas.iter().enumerate() {
        save_agent(agent, dir, &format!("gsa_l{l}"))?;
    }
    for (l, abstractor) in h.abstractors.iter().enumerate() {
        save_json(
            &dir.join(format!("abstractor_l{}.json", l + 1)),
            &Sidecar::new(abstractor.to_state()),
        )?;
    }
    Ok(())
}

fn save_agent<S: Scalar>(
    agent: &crate::agents::ActorCritic<S>,
    dir: &Path,
    name: &str,
) -> Result<(), PersistError> {
    let trees = AgentTrees {
        actor: agent.actor.store().to_tree(),
        critic: agent.critic.store().to_tree(),
        critic_ema: agent.critic_ema.store().to_tree(),
    };
    save_json(&dir.join(format!("{name}.params.json")), &trees)
}

fn load_agent<S: Scalar>(
    agent: &mut crate::agents::ActorCritic<S>,
    dir: &Path,
    name: &str,
) -> Result<(), PersistError> {
    let trees: AgentTrees<S> = load_json(&dir.join(format!("{name}.params.json")))?;
    agent.actor.store_mut().load_tree(&trees.actor)?;
    agent.critic.store_mut().load_tree(&trees.critic)?;
    agent.critic_ema.store_mut().load_tree(&trees.critic_ema)?;
    Ok(())
}

/// Rebuild a full stack from a checkpoint directory.
pub fn load_checkpoint<S: Scalar>(
    dir: &Path,
    env_spec: EnvSpec<S>,
) -> Result<(Hierarchy<S>, CheckpointManifest), PersistError> {
    let sidecar: Sidecar<CheckpointManifest> = load_json(&dir.join("manifest.json"))?;
    sidecar.check_version()?;
    let manifest = sidecar.config;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut h = Hierarchy::new(
        env_spec,
        manifest.hierarchy.clone(),
        manifest.model_configs.clone(),
        manifest.agent_configs.clone(),
        manifest.abstraction.clone(),
        manifest.goal,
        manifest.terminal_map.clone(),
        &mut rng,
    )
    .map_err(|e| PersistError::Io(std::io::Error::other(e.to_string())))?;

    for l in 0..h.models.len() {
        h.models[l] = Rssm::load(dir, &format!("model_l{l}"))?;
        h.model_emas[l] = Rssm::load(dir, &format!("model_ema_l{l}"))?;
    }
    for l in 0..h.rmas.len() {
        load_agent(&mut h.rmas[l], dir, &format!("rma_l{l}"))?;
    }
    for l in 0..h.gsas.len() {
        load_agent(&mut h.gsas[l], dir, &format!("gsa_l{l}"))?;
    }
    for l in 0..h.abstractors.len() {
        let state: Sidecar<crate::abstraction::AbstractorState<S>> =
            load_json(&dir.join(format!("abstractor_l{}.json", l + 1)))?;
        state.check_version()?;
        h.abstractors[l] = ActionAbstractor::from_state(state.config)
            .map_err(|e| PersistError::Io(std::io::Error::other(e.to_string())))?;
    }
    Ok((h, manifest))
}
