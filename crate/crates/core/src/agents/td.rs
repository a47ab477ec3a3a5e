//! TD-lambda return targets.
//!
//! Recursion: `V_H = v(s_H)`; for `t < H`,
//! `V_t = r_t + gamma * c_t * ((1 - lambda) * v(s_{t+1}) + lambda * V_{t+1})`
//! where `c_t = 1 - d_t` discounts through predicted episode ends.

use super::AgentError;
use crate::math::{Graph, Node};
use crate::scalar::Scalar;

/// Compute targets for aligned reward/continue/value sequences of length H.
pub fn td_lambda<S: Scalar>(
    rewards: &[S],
    continues: &[S],
    values: &[S],
    gamma: S,
    lambda: S,
) -> Result<Vec<S>, AgentError> {
    let h = rewards.len();
    if h == 0 {
        return Err(AgentError::EmptySequence);
    }
    if continues.len() != h || values.len() != h {
        return Err(AgentError::Config(
            "rewards, continues, and values must share length".into(),
        ));
    }
    let mut targets = vec![S::zero(); h];
    targets[h - 1] = values[h - 1];
    for t in (0..h - 1).rev() {
        let boot = (S::one() - lambda) * values[t + 1] + lambda * targets[t + 1];
        targets[t] = rewards[t] + gamma * continues[t] * boot;
    }
    Ok(targets)
}

/// Graph-space variant over `[B x 1]` node sequences, differentiable through
/// rewards, continues, and values.
pub fn td_lambda_nodes<S: Scalar>(
    g: &mut Graph<S>,
    rewards: &[Node],
    continues: &[Node],
    values: &[Node],
    gamma: S,
    lambda: S,
) -> Vec<Node> {
    let h = rewards.len();
    assert!(h > 0 && continues.len() == h && values.len() == h);
    let mut targets = vec![values[h - 1]; h];
    for t in (0..h - 1).rev() {
        let v_next = g.scale(values[t + 1], S::one() - lambda);
        let tgt_next = g.scale(targets[t + 1], lambda);
        let boot = g.add(v_next, tgt_next);
        let disc = g.scale(continues[t], gamma);
        let discounted = g.mul(disc, boot);
        targets[t] = g.add(rewards[t], discounted);
    }
    targets
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Literal recursive evaluation of the target definition.
    fn oracle(r: &[f64], c: &[f64], v: &[f64], gamma: f64, lambda: f64, t: usize) -> f64 {
        let h = r.len();
        if t == h - 1 {
            return v[h - 1];
        }
        r[t] + gamma
            * c[t]
            * ((1.0 - lambda) * v[t + 1] + lambda * oracle(r, c, v, gamma, lambda, t + 1))
    }

    #[test]
    fn lambda_zero_gives_one_step_targets() {
        let r = [1.0f64, 2.0, 3.0];
        let c = [1.0, 0.5, 1.0];
        let v = [10.0, 20.0, 30.0];
        let t = td_lambda(&r, &c, &v, 0.9, 0.0).unwrap();
        assert!((t[0] - (1.0 + 0.9 * 1.0 * 20.0)).abs() < 1e-12);
        assert!((t[1] - (2.0 + 0.9 * 0.5 * 30.0)).abs() < 1e-12);
        assert_eq!(t[2], 30.0);
    }

    #[test]
    fn lambda_one_gives_bootstrapped_monte_carlo() {
        let r = [1.0f64, 1.0, 1.0, 1.0];
        let c = [1.0; 4];
        let v = [0.0, 0.0, 0.0, 5.0];
        let gamma = 0.5;
        let t = td_lambda(&r, &c, &v, gamma, 1.0).unwrap();
        // discounted sum of rewards bootstrapped with v(s_H)
        let expect0 = 1.0 + 0.5 * (1.0 + 0.5 * (1.0 + 0.5 * 5.0));
        assert!((t[0] - expect0).abs() < 1e-12);
    }

    #[test]
    fn worked_example_matches_loop_oracle() {
        let r = [1.0, 1.0, 1.0];
        let c = [1.0; 3];
        let v = [0.0; 3];
        let t = td_lambda(&r, &c, &v, 0.5, 0.5).unwrap();
        for (i, &got) in t.iter().enumerate() {
            let want = oracle(&r, &c, &v, 0.5, 0.5, i);
            assert!((got - want).abs() < 1e-12, "t={i}: {got} vs {want}");
        }
    }

    #[test]
    fn empty_sequence_is_an_error() {
        assert!(matches!(
            td_lambda::<f64>(&[], &[], &[], 0.9, 0.9),
            Err(AgentError::EmptySequence)
        ));
    }

    proptest! {
        #[test]
        fn matches_recursion_oracle(
            seed in 0u64..400,
            h in 1usize..32,
            gamma in 0.0f64..0.999,
            lambda in 0.0f64..1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r: Vec<f64> = (0..h).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let c: Vec<f64> = (0..h).map(|_| rng.gen_range(0.0..1.0)).collect();
            let v: Vec<f64> = (0..h).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let got = td_lambda(&r, &c, &v, gamma, lambda).unwrap();
            for t in 0..h {
                let want = oracle(&r, &c, &v, gamma, lambda, t);
                prop_assert!((got[t] - want).abs() <= 1e-10 * (1.0 + want.abs()));
            }
        }
    }

    #[test]
    fn node_version_matches_scalar_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let h = 9;
        let b = 3;
        let r: Vec<Tensor<f64>> = (0..h).map(|_| Tensor::randn(b, 1, 1.0, &mut rng)).collect();
        let c: Vec<Tensor<f64>> =
            (0..h).map(|_| Tensor::randn(b, 1, 0.2, &mut rng).map(|v: f64| v.abs().min(1.0))).collect();
        let v: Vec<Tensor<f64>> = (0..h).map(|_| Tensor::randn(b, 1, 2.0, &mut rng)).collect();

        let mut g = Graph::new();
        let rn: Vec<_> = r.iter().map(|t| g.constant(t.clone())).collect();
        let cn: Vec<_> = c.iter().map(|t| g.constant(t.clone())).collect();
        let vn: Vec<_> = v.iter().map(|t| g.constant(t.clone())).collect();
        let targets = td_lambda_nodes(&mut g, &rn, &cn, &vn, 0.97, 0.9);

        for row in 0..b {
            let rr: Vec<f64> = r.iter().map(|t| t.get(row, 0)).collect();
            let cc: Vec<f64> = c.iter().map(|t| t.get(row, 0)).collect();
            let vv: Vec<f64> = v.iter().map(|t| t.get(row, 0)).collect();
            let want = td_lambda(&rr, &cc, &vv, 0.97, 0.9).unwrap();
            for t in 0..h {
                let got = g.value(targets[t]).get(row, 0);
                assert!((got - want[t]).abs() < 1e-12);
            }
        }
    }
}
