//! Temporal abstraction: converts level-(l-1) data into level-l training
//! data. Chunks trajectories with padding masks, abstracts rewards by masked
//! mean, terminals by masked max, goals by the last grounded state per chunk,
//! and compresses action-sequence chunks through a configurable abstractor.
//!
//! Nothing in this module reads agent parameters or agent performance: the
//! API accepts only trajectories, frozen models, and abstractor state.

mod action;

pub use action::{
    AbstractorState, ActionAbstractor, ActionKMeans, ActionVae, KMeansConfig, ProjectionConfig,
    RandomProjection, VaeConfig, VaeMetrics,
};

use rand::Rng;
use thiserror::Error;

use crate::rssm::{ModelState, Rssm, SampleMode};
use crate::scalar::Scalar;
use crate::trajectory::{SeqBatch, Trajectory};

#[derive(Debug, Error)]
pub enum AbstractionError {
    #[error("cannot chunk an empty trajectory")]
    EmptyTrajectory,
    #[error("chunk stride must be >= 1")]
    ZeroStride,
    #[error("chunk has no valid steps")]
    AllMasked,
    #[error("empty batch")]
    EmptyBatch,
    #[error("abstractor not initialised")]
    Uninitialised,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("model error: {0}")]
    Model(#[from] crate::rssm::RssmError),
}

/// Partition of a length-T sequence into consecutive chunks of stride `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Chunking {
    pub len: usize,
    pub k: usize,
    pub n_chunks: usize,
}

impl Chunking {
    /// Row range covered by chunk `i`, clipped to the sequence length.
    pub fn bounds(&self, i: usize) -> (usize, usize) {
        let start = i * self.k;
        (start, ((i + 1) * self.k).min(self.len))
    }
}

/// Deterministic partition into `ceil(len / k)` consecutive chunks; the last
/// chunk is padded by the caller's mask handling.
pub fn chunk(len: usize, k: usize) -> Result<Chunking, AbstractionError> {
    if k == 0 {
        return Err(AbstractionError::ZeroStride);
    }
    if len == 0 {
        return Err(AbstractionError::EmptyTrajectory);
    }
    Ok(Chunking {
        len,
        k,
        n_chunks: len.div_ceil(k),
    })
}

/// Mean reward over the valid steps of a chunk.
pub fn abstract_reward<S: Scalar>(rewards: &[S], mask: &[bool]) -> Result<S, AbstractionError> {
    assert_eq!(rewards.len(), mask.len());
    let mut sum = S::zero();
    let mut n = 0usize;
    for (&r, &m) in rewards.iter().zip(mask) {
        if m {
            sum += r;
            n += 1;
        }
    }
    if n == 0 {
        return Err(AbstractionError::AllMasked);
    }
    Ok(sum / S::from_usize(n).unwrap())
}

/// Maximum terminal flag over the valid steps of a chunk.
pub fn abstract_terminal<S: Scalar>(
    terminals: &[S],
    mask: &[bool],
) -> Result<S, AbstractionError> {
    assert_eq!(terminals.len(), mask.len());
    let mut any = false;
    let mut out = S::zero();
    for (&d, &m) in terminals.iter().zip(mask) {
        if m {
            out = out.max(d);
            any = true;
        }
    }
    if any {
        Ok(out)
    } else {
        Err(AbstractionError::AllMasked)
    }
}

/// The last valid grounded state of a chunk.
pub fn abstract_goal<'a, S: Scalar>(
    states: &'a [ModelState<S>],
    mask: &[bool],
) -> Result<&'a ModelState<S>, AbstractionError> {
    assert_eq!(states.len(), mask.len());
    states
        .iter()
        .zip(mask)
        .rev()
        .find(|(_, &m)| m)
        .map(|(s, _)| s)
        .ok_or(AbstractionError::AllMasked)
}

/// Abstract one level-(l-1) trajectory given its grounded state sequence.
///
/// The output is the level-l trajectory: goals as `x`, abstract actions as
/// `prev_action`, masked-mean rewards, masked-max terminals. Chunks without a
/// single valid step become padded rows with `mask = false`.
pub fn abstract_with_states<S: Scalar>(
    traj: &Trajectory<S>,
    states: &[ModelState<S>],
    k: usize,
    abstractor: &ActionAbstractor<S>,
    mode: SampleMode,
    rng: &mut impl Rng,
) -> Result<Trajectory<S>, AbstractionError> {
    assert_eq!(states.len(), traj.len(), "one grounded state per row");
    let chunking = chunk(traj.len(), k)?;
    let a_dim = traj.a_dim();
    let goal_dim = states.first().map_or(0, ModelState::s_dim);
    let mut out = Trajectory::new();

    for i in 0..chunking.n_chunks {
        let (lo, hi) = chunking.bounds(i);
        let mask = &traj.mask[lo..hi];
        let any_valid = mask.iter().any(|&m| m);
        if !any_valid {
            out.push(
                vec![S::zero(); goal_dim],
                vec![S::zero(); abstractor.action_dim()],
                S::zero(),
                S::zero(),
                false,
            );
            continue;
        }
        let goal = abstract_goal(&states[lo..hi], mask)?.s();
        let reward = abstract_reward(&traj.rewards[lo..hi], mask)?;
        let terminal = abstract_terminal(&traj.terminals[lo..hi], mask)?;

        // flattened action chunk, zero-padded where masked or beyond the end
        let mut flat = vec![S::zero(); k * a_dim];
        for (j, row) in (lo..hi).enumerate() {
            if traj.mask[row] {
                flat[j * a_dim..(j + 1) * a_dim].copy_from_slice(&traj.prev_actions[row]);
            }
        }
        let abstract_action = abstractor.encode_model_input(&flat, mode, rng)?;
        out.push(goal, abstract_action, reward, terminal, true);
    }
    Ok(out)
}

/// Ground `model` closed-loop over `traj` (mean mode), then abstract.
///
/// Regenerated fresh for every training batch because the lower model keeps
/// evolving.
pub fn build_level_dataset<S: Scalar>(
    traj: &Trajectory<S>,
    model: &Rssm<S>,
    k: usize,
    abstractor: &ActionAbstractor<S>,
    mode: SampleMode,
    rng: &mut impl Rng,
) -> Result<Trajectory<S>, AbstractionError> {
    if traj.is_empty() {
        return Err(AbstractionError::EmptyTrajectory);
    }
    let batch = SeqBatch::from_trajectories(&[traj]);
    let states = model
        .observe_batch(&batch, SampleMode::Mean, rng)
        .into_iter()
        .next()
        .expect("one trajectory in, one state sequence out");
    abstract_with_states(traj, &states, k, abstractor, mode, rng)
}

#[cfg(test)]
mod tests;
