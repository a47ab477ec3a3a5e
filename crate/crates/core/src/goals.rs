//! Goal similarity measures, the relative-goal transformation, and the
//! decoder cascade that reconstructs level-0 observations from higher-level
//! goals. All operations are pure.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{Graph, Node};
use crate::rssm::{Rssm, RssmError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum GoalError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("model error: {0}")]
    Model(#[from] RssmError),
}

/// Which similarity measure scores a (state, goal) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Mse,
    Sdp,
}

/// Which space the GSA reward compares in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalSpace {
    State,
    DecodedObs,
}

fn check_dims<S>(s: &[S], g: &[S]) -> Result<(), GoalError> {
    if s.len() != g.len() {
        return Err(GoalError::DimensionMismatch(s.len(), g.len()));
    }
    Ok(())
}

/// Negative Euclidean distance, always <= 0.
pub fn sim_mse<S: Scalar>(s: &[S], g: &[S]) -> Result<S, GoalError> {
    check_dims(s, g)?;
    let sq: S = s.iter().zip(g).map(|(&a, &b)| (b - a) * (b - a)).sum();
    Ok(-sq.sqrt())
}

/// Scaled dot product `(g . s) / m^2` with `m = max(|g|, |s|)`, in [-1, 1].
/// The degenerate all-zero pair scores 0.
pub fn sim_sdp<S: Scalar>(s: &[S], g: &[S]) -> Result<S, GoalError> {
    check_dims(s, g)?;
    let dot: S = s.iter().zip(g).map(|(&a, &b)| a * b).sum();
    let ns: S = s.iter().map(|&v| v * v).sum::<S>().sqrt();
    let ng: S = g.iter().map(|&v| v * v).sum::<S>().sqrt();
    let m = ns.max(ng);
    if m == S::zero() {
        return Ok(S::zero());
    }
    Ok(dot / (m * m))
}

pub fn similarity<S: Scalar>(kind: Similarity, s: &[S], g: &[S]) -> Result<S, GoalError> {
    match kind {
        Similarity::Mse => sim_mse(s, g),
        Similarity::Sdp => sim_sdp(s, g),
    }
}

/// Relative form of a goal: `g_rel = s - g`, recomputed as `s` changes.
pub fn relative_goal<S: Scalar>(s: &[S], g: &[S]) -> Result<Vec<S>, GoalError> {
    check_dims(s, g)?;
    Ok(s.iter().zip(g).map(|(&a, &b)| a - b).collect())
}

/// Decode a level-l goal down to a level-0 observation estimate.
///
/// `goal` is a level-(l-1) state vector; `models` are the stack levels
/// `[M^0 .. M^{l-1}]`. Each model's observation/goal decoder is applied from
/// the top down until level 0 emits an observation.
pub fn decode_goal_cascade<S: Scalar>(
    goal: &[S],
    models: &[&Rssm<S>],
) -> Result<Vec<S>, GoalError> {
    assert!(!models.is_empty(), "cascade needs at least one model");
    let mut x = goal.to_vec();
    for model in models.iter().rev() {
        let dec = model.decode_vec(&x)?;
        x = dec.x_mean;
    }
    Ok(x)
}

// ---------------------------------------------------------------------
// Graph-space variants used inside imagination rollouts
// ---------------------------------------------------------------------

/// Epsilon inside the norm so the gradient at zero distance stays finite.
const NORM_EPS: f64 = 1e-12;

/// Row-wise `-|g - s|` as a graph node, `[B x 1]`.
pub fn sim_mse_node<S: Scalar>(g: &mut Graph<S>, s: Node, goal: Node) -> Node {
    let d = g.sub(goal, s);
    let sq = g.square(d);
    let sum = g.sum_cols(sq);
    let sum = g.add_scalar(sum, S::of_f64(NORM_EPS));
    let norm = g.sqrt(sum);
    g.neg(norm)
}

/// Row-wise scaled dot product as a graph node, `[B x 1]`.
pub fn sim_sdp_node<S: Scalar>(g: &mut Graph<S>, s: Node, goal: Node) -> Node {
    let prod = g.mul(goal, s);
    let dot = g.sum_cols(prod);
    let s2 = g.square(s);
    let ssum = g.sum_cols(s2);
    let g2 = g.square(goal);
    let gsum = g.sum_cols(g2);
    // max(a, b) = -min(-a, -b)
    let na = g.neg(ssum);
    let nb = g.neg(gsum);
    let nmin = g.minimum(na, nb);
    let m2 = g.neg(nmin);
    let m2 = g.add_scalar(m2, S::of_f64(NORM_EPS));
    g.div(dot, m2)
}

pub fn similarity_node<S: Scalar>(
    kind: Similarity,
    g: &mut Graph<S>,
    s: Node,
    goal: Node,
) -> Node {
    match kind {
        Similarity::Mse => sim_mse_node(g, s, goal),
        Similarity::Sdp => sim_sdp_node(g, s, goal),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_examples() {
        assert_eq!(sim_mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(sim_mse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), -5.0);
        assert_eq!(
            sim_mse(&[1.0, -1.0], &[2.0, 5.0]).unwrap(),
            sim_mse(&[2.0, 5.0], &[1.0, -1.0]).unwrap()
        );
        assert!(sim_mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sdp_examples() {
        let v = [0.4f64, -0.3, 0.2];
        assert!((sim_sdp(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(sim_sdp(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 0.0);
        let neg: Vec<f64> = v.iter().map(|&x| -x).collect();
        assert!((sim_sdp(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(sim_sdp::<f64>(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn relative_goal_examples() {
        assert_eq!(relative_goal(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(relative_goal(&[1.0, 2.0], &[0.0, 2.0]).unwrap(), vec![1.0, 0.0]);
        assert!(relative_goal(&[1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn sdp_bounded_by_one(
            s in prop::collection::vec(-5.0f64..5.0, 4),
            g in prop::collection::vec(-5.0f64..5.0, 4),
        ) {
            let v = sim_sdp(&s, &g).unwrap();
            prop_assert!(v.abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn mse_translation_invariant(
            s in prop::collection::vec(-5.0f64..5.0, 3),
            g in prop::collection::vec(-5.0f64..5.0, 3),
            c in -10.0f64..10.0,
        ) {
            let a = sim_mse(&s, &g).unwrap();
            let st: Vec<f64> = s.iter().map(|&v| v + c).collect();
            let gt: Vec<f64> = g.iter().map(|&v| v + c).collect();
            let b = sim_mse(&st, &gt).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn graph_similarities_match_plain_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let s: Vec<f64> = (0..5).map(|_| f64::sample_normal(&mut rng)).collect();
            let goal: Vec<f64> = (0..5).map(|_| f64::sample_normal(&mut rng)).collect();
            let mut g = Graph::new();
            let sn = g.constant(Tensor::row_vector(&s));
            let gn = g.constant(Tensor::row_vector(&goal));
            let mse = sim_mse_node(&mut g, sn, gn);
            let sdp = sim_sdp_node(&mut g, sn, gn);
            let mse_plain = sim_mse(&s, &goal).unwrap();
            let sdp_plain = sim_sdp(&s, &goal).unwrap();
            assert!((g.value(mse).item() - mse_plain).abs() < 1e-6);
            assert!((g.value(sdp).item() - sdp_plain).abs() < 1e-6);
        }
    }

    #[test]
    fn cascade_single_stage_is_level0_decoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m0 = Rssm::<f64>::new(
            crate::rssm::RssmConfig {
                h_dim: 4,
                z_dim: 2,
                x_dim: 3,
                a_dim: 2,
                hidden_dim: 8,
                beta: 1.0,
                free_nats: 1.0,
                learn_rate: 1e-3,
                ema_rate: 0.98,
            },
            &mut rng,
        )
        .unwrap();
        let goal: Vec<f64> = (0..6).map(|_| f64::sample_normal(&mut rng) * 0.2).collect();
        let obs = decode_goal_cascade(&goal, &[&m0]).unwrap();
        assert_eq!(obs, m0.decode_vec(&goal).unwrap().x_mean);
        assert_eq!(obs.len(), 3);
    }

    #[test]
    fn cascade_two_stage_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m0 = Rssm::<f64>::new(
            crate::rssm::RssmConfig {
                h_dim: 4,
                z_dim: 2,
                x_dim: 3,
                a_dim: 2,
                hidden_dim: 8,
                beta: 1.0,
                free_nats: 1.0,
                learn_rate: 1e-3,
                ema_rate: 0.98,
            },
            &mut rng,
        )
        .unwrap();
        // level-1 model's x space is level-0's state space (6)
        let m1 = Rssm::<f64>::new(
            crate::rssm::RssmConfig {
                h_dim: 5,
                z_dim: 3,
                x_dim: 6,
                a_dim: 4,
                hidden_dim: 8,
                beta: 1.0,
                free_nats: 1.0,
                learn_rate: 1e-3,
                ema_rate: 0.98,
            },
            &mut rng,
        )
        .unwrap();
        // a level-1 state decodes down to an observation
        let level1_state: Vec<f64> = (0..8).map(|_| f64::sample_normal(&mut rng) * 0.2).collect();
        let obs = decode_goal_cascade(&level1_state, &[&m0, &m1]).unwrap();
        assert_eq!(obs.len(), 3);

        // dimension mismatch at any stage errors
        assert!(decode_goal_cascade(&level1_state[..5], &[&m0, &m1]).is_err());
    }
}
