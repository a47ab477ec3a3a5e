use approx::assert_relative_eq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::math::Bind;
use crate::trajectory::Trajectory;

fn tiny_config() -> RssmConfig {
    RssmConfig {
        h_dim: 4,
        z_dim: 2,
        x_dim: 3,
        a_dim: 2,
        hidden_dim: 8,
        beta: 1.0,
        free_nats: 0.0,
        learn_rate: 1e-3,
        ema_rate: 0.98,
    }
}

fn tiny_model(seed: u64) -> Rssm<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Rssm::new(tiny_config(), &mut rng).unwrap()
}

fn random_batch(steps: usize, batch: usize, seed: u64) -> SeqBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajs: Vec<Trajectory<f64>> = (0..batch)
        .map(|_| {
            let mut t = Trajectory::new();
            for i in 0..steps {
                t.push(
                    (0..3).map(|_| f64::sample_normal(&mut rng) * 0.3).collect(),
                    (0..2).map(|_| f64::sample_normal(&mut rng) * 0.2).collect(),
                    -0.01,
                    if i == steps - 1 { 1.0 } else { 0.0 },
                    true,
                );
            }
            t
        })
        .collect();
    let refs: Vec<&Trajectory<f64>> = trajs.iter().collect();
    SeqBatch::from_trajectories(&refs)
}

#[test]
fn initial_state_is_zero_and_constant() {
    let m = tiny_model(1);
    let a = m.initial_state();
    let b = m.initial_state();
    assert!(a.h.iter().all(|&v| v == 0.0));
    assert!(a.z.iter().all(|&v| v == 0.0));
    assert_eq!(a.s().len(), 4 + 2);
    assert_eq!(a, b);
}

#[test]
fn step_closed_is_deterministic_with_fixed_noise() {
    let m = tiny_model(2);
    let prev = m.initial_state();
    let run = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.step_closed(&prev, &[0.1, -0.2], &[0.3, 0.0, -0.1], SampleMode::Sample, &mut rng)
            .unwrap()
    };
    let (s1, p1, q1) = run(9);
    let (s2, p2, q2) = run(9);
    assert_eq!(s1, s2);
    assert_eq!(p1, p2);
    assert_eq!(q1, q2);
    assert!(q1.stddev.iter().all(|&v| v > 0.0));
    assert!(s1.all_finite());
}

#[test]
fn step_rejects_shape_mismatch() {
    let m = tiny_model(2);
    let prev = m.initial_state();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        m.step_closed(&prev, &[0.1], &[0.3, 0.0, -0.1], SampleMode::Mean, &mut rng),
        Err(RssmError::Shape(_))
    ));
    assert!(matches!(
        m.step_open(&prev, &[0.1, 0.0, 0.0], SampleMode::Mean, &mut rng),
        Err(RssmError::Shape(_))
    ));
}

#[test]
fn open_and_closed_share_the_deterministic_path() {
    // for fixed (prev, action) the h produced by step_open and step_closed
    // must be bitwise equal: the x input only feeds the posterior
    let m = tiny_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut prev = m.initial_state();
    // drive a few steps to land on a generic state
    for _ in 0..3 {
        let (s, _) = m
            .step_open(&prev, &[0.2, 0.1], SampleMode::Sample, &mut rng)
            .unwrap();
        prev = s;
    }
    let action = [0.05, -0.3];
    let (open_state, _) = m
        .step_open(&prev, &action, SampleMode::Mean, &mut rng)
        .unwrap();
    let (closed_state, _, _) = m
        .step_closed(&prev, &action, &[9.0, -9.0, 4.2], SampleMode::Mean, &mut rng)
        .unwrap();
    assert_eq!(open_state.h, closed_state.h);
}

#[test]
fn mean_mode_open_steps_are_reproducible() {
    let m = tiny_model(5);
    let prev = m.initial_state();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (a, _) = m.step_open(&prev, &[0.1, 0.1], SampleMode::Mean, &mut rng).unwrap();
    let (b, _) = m.step_open(&prev, &[0.1, 0.1], SampleMode::Mean, &mut rng).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.s().len(), 6);
}

#[test]
fn decode_is_finite_and_d_prob_in_unit_interval() {
    let m = tiny_model(6);
    let zero = m.decode(&m.initial_state());
    assert!(zero.x_mean.iter().all(|v| v.is_finite()));
    assert!(zero.r_mean.is_finite());
    assert!((0.0..=1.0).contains(&zero.d_prob));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut state = m.initial_state();
    for _ in 0..10 {
        let (s, _) = m
            .step_open(&state, &[0.3, -0.3], SampleMode::Sample, &mut rng)
            .unwrap();
        state = s;
        let dec = m.decode(&state);
        assert!(dec.x_mean.iter().all(|v| v.is_finite()));
        assert!((0.0..=1.0).contains(&dec.d_prob));
    }
}

#[test]
fn elbo_kl_component_zero_for_identical_distributions() {
    // build a KL directly from two identical Gaussian heads
    let m = tiny_model(8);
    let mut g = crate::math::Graph::new();
    let state = m.initial_nodes(&mut g, 2);
    let a = g.constant(crate::math::Tensor::zeros(2, 2));
    let h = m.core_step(&mut g, state, a, Bind::Frozen);
    let p = m.prior_head(&mut g, h, Bind::Frozen);
    let kl = crate::math::nets::gaussian_kl(&mut g, p, p);
    for &v in g.value(kl).data() {
        assert!(v.abs() < 1e-12);
    }
}

#[test]
fn beta_zero_total_is_sum_of_reconstruction_nlls() {
    let mut cfg = tiny_config();
    cfg.beta = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = Rssm::<f64>::new(cfg, &mut rng).unwrap();
    let batch = random_batch(5, 3, 10);
    let comps = m.elbo_loss(&batch, &mut rng).unwrap();
    assert_relative_eq!(
        comps.total,
        comps.recon_x + comps.recon_r + comps.recon_d,
        epsilon = 1e-12
    );
}

#[test]
fn elbo_rejects_empty_mask() {
    let m = tiny_model(11);
    let mut t = Trajectory::new();
    t.push(vec![0.0; 3], vec![0.0; 2], 0.0, 0.0, false);
    let batch = SeqBatch::from_trajectories(&[&t]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        m.elbo_loss(&batch, &mut rng),
        Err(RssmError::EmptyMask)
    ));
}

#[test]
fn masked_steps_are_inert_bitwise() {
    let m = tiny_model(12);
    let base = random_batch(6, 2, 13);
    // rebuild with the last two steps masked out
    let mask_from = 4;
    let make = |perturb: f64| {
        let mut b = base.clone();
        for t in mask_from..b.steps {
            b.mask[t].fill(0.0);
            for v in b.x[t].data_mut() {
                *v += perturb;
            }
            for v in b.r[t].data_mut() {
                *v += perturb;
            }
            for v in b.d[t].data_mut() {
                *v = if perturb == 0.0 { *v } else { 1.0 - *v };
            }
        }
        b
    };
    let b0 = make(0.0);
    let b1 = make(123.456);
    // freeze noise across the two evaluations
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let noise = m.elbo_noise(&b0, &mut rng);
    let mut g0 = crate::math::Graph::new();
    let n0 = m.elbo_graph(&mut g0, &b0, &noise, Bind::Frozen).unwrap();
    let mut g1 = crate::math::Graph::new();
    let n1 = m.elbo_graph(&mut g1, &b1, &noise, Bind::Frozen).unwrap();
    let t0 = g0.scalar_value(n0.total);
    let t1 = g1.scalar_value(n1.total);
    assert_eq!(t0.to_bits(), t1.to_bits(), "masked perturbation leaked into the loss");
}

#[test]
fn training_reduces_reconstruction_on_constant_sequence() {
    // constant x_t = c; smoothed recon_x should fall over training
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut m = tiny_model(14);
    let mut t = Trajectory::new();
    for _ in 0..8 {
        t.push(vec![0.8, -0.4, 0.2], vec![0.0, 0.0], -0.01, 0.0, true);
    }
    let batch = SeqBatch::from_trajectories(&[&t, &t, &t, &t]);
    let mut adam = crate::math::Adam::new(m.store(), 3e-3, Some(100.0));
    let mut history = Vec::new();
    for _ in 0..500 {
        let comps = m.train_elbo(&batch, &mut rng, &mut adam).unwrap();
        history.push(comps.recon_x);
    }
    let early: f64 = history[..50].iter().sum::<f64>() / 50.0;
    let late: f64 = history[history.len() - 50..].iter().sum::<f64>() / 50.0;
    assert!(
        late < early * 0.5,
        "recon_x did not fall: early {early}, late {late}"
    );
}

#[test]
fn rollout_contract_checks() {
    let m = tiny_model(15);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let xs = vec![vec![0.1, 0.2, 0.3]; 4];
    let actions = vec![vec![0.0, 0.0]; 10];
    assert!(matches!(
        m.rollout(&xs, &actions, 0, 3, SampleMode::Mean, &mut rng),
        Err(RssmError::Contract(_))
    ));
    assert!(matches!(
        m.rollout(&xs, &actions, 5, 3, SampleMode::Mean, &mut rng),
        Err(RssmError::Contract(_))
    ));
    assert!(matches!(
        m.rollout(&xs, &actions[..2], 4, 12, SampleMode::Mean, &mut rng),
        Err(RssmError::Contract(_))
    ));
}

#[test]
fn rollout_horizon_zero_equals_closed_loop_drive() {
    let m = tiny_model(16);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs: Vec<Vec<f64>> = (0..5)
        .map(|i| vec![0.1 * i as f64, -0.05 * i as f64, 0.2])
        .collect();
    let actions: Vec<Vec<f64>> = (0..4).map(|i| vec![0.1, 0.02 * i as f64]).collect();

    let ro = m
        .rollout(&xs, &actions, 5, 0, SampleMode::Mean, &mut rng)
        .unwrap();
    assert_eq!(ro.len(), 5);
    assert!(ro.iter().all(|s| s.posterior.is_some()));

    // manual closed-loop drive must match exactly in mean mode
    let mut state = m.initial_state();
    let zero = vec![0.0, 0.0];
    for (i, step) in ro.iter().enumerate() {
        let action = if i == 0 { &zero } else { &actions[i - 1] };
        let (next, _, _) = m
            .step_closed(&state, action, &xs[i], SampleMode::Mean, &mut rng)
            .unwrap();
        assert_eq!(next, step.state);
        state = next;
    }
}

#[test]
fn rollout_open_section_has_no_posterior() {
    let m = tiny_model(17);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xs = vec![vec![0.0, 0.0, 0.0]; 3];
    let actions = vec![vec![0.1, 0.1]; 7];
    let ro = m
        .rollout(&xs, &actions, 3, 5, SampleMode::Mean, &mut rng)
        .unwrap();
    assert_eq!(ro.len(), 8);
    assert!(ro[..3].iter().all(|s| s.posterior.is_some()));
    assert!(ro[3..].iter().all(|s| s.posterior.is_none()));
    assert!(ro.iter().all(|s| s.state.all_finite()));
}

#[test]
fn ema_update_moves_toward_live() {
    let live = tiny_model(18);
    let mut ema = live.clone_model();
    // zero out the EMA copy, then pull it toward live
    for (id, _, _) in live.store().iter() {
        ema.store_mut().value_mut(id).fill(0.0);
    }
    ema_update(&live, &mut ema, 0.0).unwrap();
    for (id, _, t) in live.store().iter() {
        assert_eq!(ema.store().value(id), t);
    }
}

#[test]
fn checkpoint_roundtrip_preserves_behaviour() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_model(19);
    m.save(dir.path(), "model_l0").unwrap();
    let loaded: Rssm<f64> = Rssm::load(dir.path(), "model_l0").unwrap();
    assert_eq!(loaded.config(), m.config());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let prev = m.initial_state();
    let (a, _, _) = m
        .step_closed(&prev, &[0.1, 0.2], &[0.3, -0.3, 0.0], SampleMode::Mean, &mut rng)
        .unwrap();
    let (b, _, _) = loaded
        .step_closed(&prev, &[0.1, 0.2], &[0.3, -0.3, 0.0], SampleMode::Mean, &mut rng)
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn elbo_gradients_match_finite_differences() {
    // relative tolerance 1e-3 with fixed sampling noise on the tiny model
    let m = tiny_model(20);
    let batch = random_batch(4, 2, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let noise = m.elbo_noise(&batch, &mut rng);

    let mut g = crate::math::Graph::new();
    let nodes = m.elbo_graph(&mut g, &batch, &noise, Bind::Trainable).unwrap();
    let grads = g.backward(nodes.total);
    let pg = g.param_grads(&grads, m.store());

    let eval = |model: &Rssm<f64>| -> f64 {
        let mut g = crate::math::Graph::new();
        let nodes = model.elbo_graph(&mut g, &batch, &noise, Bind::Frozen).unwrap();
        g.scalar_value(nodes.total)
    };

    let eps = 1e-5;
    let mut checked = 0usize;
    let mut m_var = m.clone_model();
    for (id, _name, tensor) in m.store().iter() {
        let n = tensor.len();
        // probe a few entries per tensor to keep runtime sane
        for e in (0..n).step_by(7.max(n / 5)) {
            let orig = m.store().value(id).data()[e];
            m_var.store_mut().value_mut(id).data_mut()[e] = orig + eps;
            let up = eval(&m_var);
            m_var.store_mut().value_mut(id).data_mut()[e] = orig - eps;
            let down = eval(&m_var);
            m_var.store_mut().value_mut(id).data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = pg[id.index()].as_ref().map(|t| t.data()[e]).unwrap_or(0.0);
            let denom = an.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((an - fd) / denom).abs() < 1e-3,
                "grad mismatch at {e}: analytic {an}, fd {fd}"
            );
            checked += 1;
        }
    }
    assert!(checked > 30, "checked too few entries: {checked}");
}
