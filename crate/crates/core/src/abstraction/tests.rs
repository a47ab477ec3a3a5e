use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::action::AbstractorState;
use super::*;
use crate::math::{Adam, Tensor};
use crate::rssm::RssmConfig;

#[test]
fn chunk_counts() {
    assert_eq!(chunk(32, 8).unwrap().n_chunks, 4);
    assert_eq!(chunk(10, 8).unwrap().n_chunks, 2);
    assert_eq!(chunk(10, 1).unwrap().n_chunks, 10);
    assert!(matches!(chunk(0, 4), Err(AbstractionError::EmptyTrajectory)));
    assert!(matches!(chunk(4, 0), Err(AbstractionError::ZeroStride)));
}

#[test]
fn chunk_bounds_clip_to_length() {
    let c = chunk(10, 8).unwrap();
    assert_eq!(c.bounds(0), (0, 8));
    assert_eq!(c.bounds(1), (8, 10));
}

#[test]
fn reward_abstraction_examples() {
    let r = vec![-0.01f64; 8];
    let m = vec![true; 8];
    assert!((abstract_reward(&r, &m).unwrap() + 0.01).abs() < 1e-15);

    let r = vec![0.0, 0.0, 0.0, 1.0];
    let m = vec![true; 4];
    assert_eq!(abstract_reward(&r, &m).unwrap(), 0.25);

    let r = vec![5.0, 5.0, 123.0, -7.0];
    let m = vec![true, true, false, false];
    assert_eq!(abstract_reward(&r, &m).unwrap(), 5.0);

    assert!(matches!(
        abstract_reward::<f64>(&[1.0], &[false]),
        Err(AbstractionError::AllMasked)
    ));
}

#[test]
fn terminal_abstraction_examples() {
    let m4 = vec![true; 4];
    assert_eq!(abstract_terminal(&[0.0, 0.0, 1.0, 0.0], &m4).unwrap(), 1.0);
    assert_eq!(abstract_terminal(&[0.0, 0.0, 0.0, 0.0], &m4).unwrap(), 0.0);
    // padded value 1 beyond the mask must not leak through
    assert_eq!(
        abstract_terminal(&[0.0, 1.0], &[true, false]).unwrap(),
        0.0
    );
}

fn state(v: f64) -> crate::rssm::ModelState<f64> {
    crate::rssm::ModelState {
        h: vec![v, v],
        z: vec![-v],
    }
}

#[test]
fn goal_abstraction_takes_last_valid_state() {
    let states: Vec<_> = (1..=8).map(|i| state(i as f64)).collect();
    let full = vec![true; 8];
    assert_eq!(abstract_goal(&states, &full).unwrap(), &states[7]);

    let mut mask = vec![false; 8];
    mask[0] = true;
    mask[1] = true;
    mask[2] = true;
    assert_eq!(abstract_goal(&states, &mask).unwrap(), &states[2]);

    assert_eq!(abstract_goal(&states[..1], &[true]).unwrap(), &states[0]);
}

proptest! {
    // brute-force oracle equivalence against a direct loop over random
    // trajectories with T <= 64 and k in {1, 2, 4, 8}
    #[test]
    fn masked_abstraction_matches_brute_force(
        seed in 0u64..300,
        len in 1usize..64,
        k_pow in 0u32..4,
    ) {
        let k = 2usize.pow(k_pow);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rewards: Vec<f64> = (0..len).map(|_| f64::sample_uniform(&mut rng, -1.0, 1.0)).collect();
        let terminals: Vec<f64> = (0..len).map(|_| if rng.gen_bool(0.2) { 1.0 } else { 0.0 }).collect();
        // random suffix padding inside the final chunk
        let valid = 1 + rng.gen_range(0..len);
        let mask: Vec<bool> = (0..len).map(|i| i < valid).collect();

        let chunking = chunk(len, k).unwrap();
        for i in 0..chunking.n_chunks {
            let (lo, hi) = chunking.bounds(i);
            // oracle: direct loops
            let mut sum = 0.0;
            let mut n = 0usize;
            let mut dmax = 0.0f64;
            for j in lo..hi {
                if mask[j] {
                    sum += rewards[j];
                    n += 1;
                    dmax = dmax.max(terminals[j]);
                }
            }
            let got_r = abstract_reward(&rewards[lo..hi], &mask[lo..hi]);
            let got_d = abstract_terminal(&terminals[lo..hi], &mask[lo..hi]);
            if n == 0 {
                prop_assert!(got_r.is_err());
                prop_assert!(got_d.is_err());
            } else {
                prop_assert_eq!(got_r.unwrap(), sum / n as f64);
                prop_assert_eq!(got_d.unwrap(), dmax);
            }
        }
    }

    #[test]
    fn projection_is_linear(
        seed in 0u64..100,
        alpha in -3.0f64..3.0,
    ) {
        let proj: RandomProjection<f64> = RandomProjection::new(ProjectionConfig {
            in_dim: 6,
            out_dim: 3,
            seed,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        let x: Vec<f64> = (0..6).map(|_| f64::sample_uniform(&mut rng, -1.0, 1.0)).collect();
        let y: Vec<f64> = (0..6).map(|_| f64::sample_uniform(&mut rng, -1.0, 1.0)).collect();

        // homogeneity: f(a x) = a f(x), exactly
        let fx = proj.project(&x);
        let ax: Vec<f64> = x.iter().map(|&v| v * alpha).collect();
        let fax = proj.project(&ax);
        for (a, b) in fax.iter().zip(&fx) {
            prop_assert!((a - b * alpha).abs() < 1e-9 * (1.0 + b.abs() * alpha.abs()));
        }

        // additivity within float tolerance
        let xy: Vec<f64> = x.iter().zip(&y).map(|(&a, &b)| a + b).collect();
        let fxy = proj.project(&xy);
        let fy = proj.project(&y);
        for ((s, a), b) in fxy.iter().zip(&fx).zip(&fy) {
            prop_assert!((s - (a + b)).abs() < 1e-12);
        }
    }
}

#[test]
fn projection_zero_maps_to_zero_and_roundtrips() {
    let cfg = ProjectionConfig {
        in_dim: 8,
        out_dim: 4,
        seed: 42,
    };
    let proj: RandomProjection<f64> = RandomProjection::new(cfg.clone());
    assert!(proj.project(&[0.0; 8]).iter().all(|&v| v == 0.0));

    // serialize the matrix, reload, compare exact outputs (process-restart proxy)
    let json = serde_json::to_string(&proj).unwrap();
    let reloaded: RandomProjection<f64> = serde_json::from_str(&json).unwrap();
    let chunk = [0.3, -0.2, 0.9, 0.0, -1.0, 0.5, 0.1, -0.7];
    assert_eq!(proj.project(&chunk), reloaded.project(&chunk));

    // reconstruction from the same seed is also identical
    let again: RandomProjection<f64> = RandomProjection::new(cfg);
    assert_eq!(proj.project(&chunk), again.project(&chunk));
}

#[test]
fn kmeans_assignment_and_updates() {
    let mut km: ActionKMeans<f64> = ActionKMeans::new(KMeansConfig {
        in_dim: 2,
        n_centroids: 3,
        rho: 1.0,
    })
    .unwrap();
    assert!(matches!(km.assign(&[0.0, 0.0]), Err(AbstractionError::Uninitialised)));

    // hand-set centroids via init on a crafted batch
    let batch = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    km.init_from_batch(&batch, &mut rng).unwrap();

    // a chunk equal to a centroid maps to that centroid
    let c0 = km.centroids().unwrap().row(0).to_vec();
    assert_eq!(km.assign(&c0).unwrap(), 0);

    // rho = 1 with a single assigned chunk replaces the centroid
    let probe = vec![5.0, 5.0];
    let id = km.assign(&probe).unwrap();
    let before: Vec<Vec<f64>> = (0..3).map(|i| km.centroids().unwrap().row(i).to_vec()).collect();
    km.update(&Tensor::from_rows(std::slice::from_ref(&probe))).unwrap();
    assert_eq!(km.centroids().unwrap().row(id), probe.as_slice());
    // unassigned centroids bitwise unchanged
    for i in 0..3 {
        if i != id {
            assert_eq!(km.centroids().unwrap().row(i), before[i].as_slice());
        }
    }
}

#[test]
fn kmeans_tie_breaks_to_lowest_id() {
    let mut km: ActionKMeans<f64> = ActionKMeans::new(KMeansConfig {
        in_dim: 1,
        n_centroids: 6,
        rho: 0.05,
    })
    .unwrap();
    // forge a symmetric centroid table: ids 2 and 5 are equidistant from 0.5
    let batch = Tensor::from_rows(&[
        vec![10.0],
        vec![-10.0],
        vec![0.0],
        vec![20.0],
        vec![-20.0],
        vec![1.0],
    ]);
    // init picks random rows; overwrite deterministically through update with rho=1
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    km.init_from_batch(&batch, &mut rng).unwrap();
    let km_state = AbstractorState::KMeans {
        config: km.config().clone(),
        centroids: Some(batch.clone()),
    };
    let km = match ActionAbstractor::from_state(km_state).unwrap() {
        ActionAbstractor::KMeans(k) => k,
        _ => unreachable!(),
    };
    assert_eq!(km.assign(&[0.5]).unwrap(), 2);
}

#[test]
fn vae_requires_compression() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let err = ActionVae::<f64>::new(
        VaeConfig {
            in_dim: 4,
            latent_dim: 4,
            hidden_dim: 8,
            beta: 1.0,
            sigma_prior: 0.1,
            learn_rate: 1e-3,
        },
        &mut rng,
    );
    assert!(matches!(err, Err(AbstractionError::Config(_))));
}

#[test]
fn vae_mean_encode_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let vae = ActionVae::<f64>::new(
        VaeConfig {
            in_dim: 8,
            latent_dim: 3,
            hidden_dim: 16,
            beta: 1.0,
            sigma_prior: 0.1,
            learn_rate: 1e-3,
        },
        &mut rng,
    )
    .unwrap();
    let chunk = [0.1, -0.2, 0.3, 0.0, 0.05, -0.3, 0.2, 0.25];
    let a = vae.encode(&chunk, SampleMode::Mean, &mut rng);
    let b = vae.encode(&chunk, SampleMode::Mean, &mut rng);
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
}

#[test]
fn vae_training_reconstructs_action_chunks() {
    // Nav2d-shaped chunks (k=8, a_dim=2, latent 4): mean reconstruction error
    // per action coordinate below 0.05 * a_max after training
    let a_max = 0.3;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut vae = ActionVae::<f64>::new(
        VaeConfig {
            in_dim: 16,
            latent_dim: 4,
            hidden_dim: 64,
            beta: 0.01,
            sigma_prior: 0.1,
            learn_rate: 1e-3,
        },
        &mut rng,
    )
    .unwrap();
    let mut adam = Adam::new(vae.store(), vae.config().learn_rate, Some(100.0));
    // structured chunks: smooth random walks, like real action sequences
    let sample_chunk = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut out = Vec::with_capacity(16);
        let mut vx = f64::sample_uniform(rng, -a_max, a_max);
        let mut vy = f64::sample_uniform(rng, -a_max, a_max);
        for _ in 0..8 {
            vx = (vx + f64::sample_uniform(rng, -0.02, 0.02)).clamp(-a_max, a_max);
            vy = (vy + f64::sample_uniform(rng, -0.02, 0.02)).clamp(-a_max, a_max);
            out.push(vx);
            out.push(vy);
        }
        out
    };
    for _ in 0..10_000 {
        let rows: Vec<Vec<f64>> = (0..32).map(|_| sample_chunk(&mut rng)).collect();
        let batch = Tensor::from_rows(&rows);
        vae.train_step(&batch, &mut rng, &mut adam).unwrap();
    }
    let mut err_sum = 0.0;
    let mut n = 0.0;
    for _ in 0..200 {
        let chunk = sample_chunk(&mut rng);
        let latent = vae.encode(&chunk, SampleMode::Mean, &mut rng);
        let recon = vae.decode(&latent);
        for (a, b) in chunk.iter().zip(&recon) {
            err_sum += (a - b).abs();
            n += 1.0;
        }
    }
    let mean_err = err_sum / n;
    assert!(
        mean_err < 0.05 * a_max,
        "per-coordinate reconstruction error too high: {mean_err}"
    );
}

#[test]
fn build_level_dataset_shapes_and_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = crate::rssm::Rssm::<f64>::new(
        RssmConfig {
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
    let proj = ActionAbstractor::Projection(RandomProjection::new(ProjectionConfig {
        in_dim: 8 * 2,
        out_dim: 4,
        seed: 1,
    }));

    let mut traj = crate::trajectory::Trajectory::new();
    for i in 0..32 {
        traj.push(
            vec![0.01 * i as f64, 0.0, -0.01 * i as f64],
            vec![0.1, -0.1],
            -0.01,
            if i == 31 { 1.0 } else { 0.0 },
            true,
        );
    }
    let ds = build_level_dataset(&traj, &model, 8, &proj, SampleMode::Mean, &mut rng).unwrap();
    assert_eq!(ds.len(), 4);
    assert_eq!(ds.x_dim(), 6); // s_dim of the lower model
    assert_eq!(ds.a_dim(), 4);
    assert!(ds.mask.iter().all(|&m| m));
    assert!((ds.rewards[0] + 0.01).abs() < 1e-12);
    assert_eq!(ds.terminals[3], 1.0);
    assert_eq!(ds.terminals[0], 0.0);

    // k = 1 with an identity-width projection keeps rewards/terminals verbatim
    let ident = ActionAbstractor::Projection(RandomProjection::new(ProjectionConfig {
        in_dim: 2,
        out_dim: 1,
        seed: 2,
    }));
    let ds1 = build_level_dataset(&traj, &model, 1, &ident, SampleMode::Mean, &mut rng).unwrap();
    assert_eq!(ds1.len(), 32);
    assert_eq!(ds1.rewards, traj.rewards);
    assert_eq!(ds1.terminals, traj.terminals);

    // all-zero rewards stay all-zero through abstraction
    let mut zero_traj = traj.clone();
    for r in zero_traj.rewards.iter_mut() {
        *r = 0.0;
    }
    let dz = build_level_dataset(&zero_traj, &model, 8, &proj, SampleMode::Mean, &mut rng).unwrap();
    assert!(dz.rewards.iter().all(|&r| r == 0.0));
}

#[test]
fn dataset_regeneration_is_bit_reproducible_in_mean_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = crate::rssm::Rssm::<f64>::new(
        RssmConfig {
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
    let vae = ActionAbstractor::Vae(
        ActionVae::new(
            VaeConfig {
                in_dim: 8,
                latent_dim: 3,
                hidden_dim: 8,
                beta: 1.0,
                sigma_prior: 0.1,
                learn_rate: 1e-3,
            },
            &mut rng,
        )
        .unwrap(),
    );
    let mut traj = crate::trajectory::Trajectory::new();
    for i in 0..13 {
        traj.push(
            vec![0.1, 0.2 - 0.01 * i as f64, 0.0],
            vec![0.05, -0.05],
            -0.01,
            0.0,
            true,
        );
    }
    let a = build_level_dataset(&traj, &model, 4, &vae, SampleMode::Mean, &mut rng).unwrap();
    let b = build_level_dataset(&traj, &model, 4, &vae, SampleMode::Mean, &mut rng).unwrap();
    assert_eq!(a.xs, b.xs);
    assert_eq!(a.prev_actions, b.prev_actions);
    assert_eq!(a.rewards, b.rewards);
    // padded final chunk present and masked
    assert_eq!(a.len(), 4);
    assert!(a.mask.iter().all(|&m| m));
}
