mod common;

use aggflock::aggregation::{AggregationState, DistributedAggregator};
use aggflock::controllers::{
    compute_features, global_controller, local_controller, potential, potential_gradient, PotentialParams,
};
use aggflock::dynamics::{init_flock_disc, saturate, step, ActionMatrix, SimConfig};
use aggflock::evaluation::{run_episode, velocity_variance_cost, ControllerSpec, EpisodeOptions};
use aggflock::gnn::{observe, FeatureOptions};
use aggflock::imitation::{collect_from, CollectSpec, DaggerSchedule};
use aggflock::nn::{
    decode_model, encode_model, init_params, loss, loss_and_gradient, AdamConfig, AdamState, Architecture,
    Minibatch,
};
use aggflock::rng::{stream, Purpose};
use aggflock::swarm::{
    build_comm_graph, build_shift_operator, khop_neighborhood, CommGraph, FeatureMatrix, ShiftScheme,
};
use aggflock::Vec2;
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn rng(seed: u64) -> aggflock::rng::SimRng {
    stream(seed, Purpose::Misc, 0)
}

fn scheme(binary: bool) -> ShiftScheme {
    if binary {
        ShiftScheme::BinaryAdjacency
    } else {
        ShiftScheme::MeanNeighbor
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn graph_is_symmetric_and_strict(seed in any::<u64>(), n in 2usize..12, radius in 0.3f64..3.0) {
        let s = random_state(&mut rng(seed), n, 2.0, 1.0);
        let g = build_comm_graph(&s, radius).unwrap();
        for i in 0..n {
            prop_assert!(!g.contains(i, i));
            for j in 0..n {
                let d = (s.positions[j] - s.positions[i]).norm();
                prop_assert_eq!(g.contains(i, j), i != j && d > 0.0 && d < radius);
                prop_assert_eq!(g.contains(i, j), g.contains(j, i));
            }
        }
    }

    #[test]
    fn shift_rows(seed in any::<u64>(), n in 2usize..10, binary in any::<bool>()) {
        let s = random_state(&mut rng(seed), n, 1.5, 1.0);
        let g = build_comm_graph(&s, 1.0).unwrap();
        let sh = build_shift_operator(&g, scheme(binary));
        for i in 0..n {
            prop_assert_eq!(sh.get(i, i), 0.0);
            let total: f64 = (0..n).map(|j| sh.get(i, j)).sum();
            let expected = match (g.degree(i), binary) {
                (0, _) => 0.0,
                (d, true) => d as f64,
                (_, false) => 1.0,
            };
            prop_assert!((total - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn khop_matches_adjacency_products(seed in any::<u64>(), n in 2usize..9, k in 0usize..5) {
        let mut r = rng(seed);
        let graphs: Vec<CommGraph> = wandering_states(&mut r, n, k.max(1))
            .iter()
            .rev()
            .map(|s| build_comm_graph(s, 1.2).unwrap())
            .collect();
        let mut prod: Dense = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        for g in &graphs[..k] {
            prod = dense_mul(&prod, &adjacency(g));
        }
        for i in 0..n {
            let set = khop_neighborhood(&graphs, i, k).unwrap();
            for j in 0..n {
                prop_assert_eq!(set.contains(&j), prod[i][j] > 0.0, "i={} j={} k={}", i, j, k);
            }
        }
    }

    #[test]
    fn aggregation_matches_delayed_products(seed in any::<u64>(), n in 2usize..8, k in 1usize..5, binary in any::<bool>()) {
        let mut r = rng(seed);
        let steps = 10;
        let states = wandering_states(&mut r, n, steps);
        let shifts: Vec<_> = states
            .iter()
            .map(|s| build_shift_operator(&build_comm_graph(s, 1.2).unwrap(), scheme(binary)))
            .collect();
        let xs: Vec<FeatureMatrix> = (0..steps).map(|_| random_features(&mut r, n, 3)).collect();
        let mut agg = AggregationState::new(n, 3, k).unwrap();
        for t in 0..steps {
            agg.update(&shifts[t], &xs[t]).unwrap();
            for kk in 0..k {
                let expected = if kk > t {
                    vec![vec![0.0; 3]; n]
                } else {
                    let mut m = features_dense(&xs[t - kk]);
                    for s in (t + 1 - kk)..=t {
                        m = dense_mul(&shift_dense(&shifts[s]), &m);
                    }
                    m
                };
                prop_assert!(max_abs(&features_dense(agg.buffer(kk)), &expected) <= 1e-12);
            }
        }
    }

    #[test]
    fn distributed_matches_centralized(seed in any::<u64>(), n in 2usize..10, k in 1usize..5, binary in any::<bool>()) {
        let mut r = rng(seed);
        let states = wandering_states(&mut r, n, 15);
        let mut agg = AggregationState::new(n, 4, k).unwrap();
        let mut dist = DistributedAggregator::new(n, 4, k);
        for s in &states {
            let g = build_comm_graph(s, 1.2).unwrap();
            let sh = build_shift_operator(&g, scheme(binary));
            let x = random_features(&mut r, n, 4);
            agg.update(&sh, &x).unwrap();
            let seqs = dist.round(&g, &sh, &x).unwrap();
            for (i, z) in seqs.iter().enumerate() {
                prop_assert!(z.max_abs_diff(&agg.sequence(i).unwrap()) <= 1e-12);
            }
        }
    }

    #[test]
    fn permutation_equivariance(seed in any::<u64>(), n in 2usize..10, k in 1usize..4) {
        let mut r = rng(seed);
        let states = wandering_states(&mut r, n, 6);
        let perm = permutation(&mut r, n);
        let arch = Architecture::flocking(k, vec![8]).unwrap();
        let params = init_params(&arch, &mut r).unwrap();
        let opts = FeatureOptions::default();
        let mut a = AggregationState::new(n, feature_dim(), k).unwrap();
        let mut b = AggregationState::new(n, feature_dim(), k).unwrap();
        let mut mag = 0.0f64;
        for s in &states {
            let sp = s.permuted(&perm);
            let o = observe(s, 1.2, &opts).unwrap();
            let op = observe(&sp, 1.2, &opts).unwrap();
            mag = mag.max(max_magnitude(&o.features));
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(op.graph.contains(i, j), o.graph.contains(perm[i], perm[j]));
                    prop_assert!((op.shift.get(i, j) - o.shift.get(perm[i], perm[j])).abs() <= 1e-12);
                }
            }
            prop_assert!(scaled_diff(op.features.as_slice(), o.features.permuted(&perm).as_slice(), mag) <= 1e-12);
            a.update(&o.shift, &o.features).unwrap();
            b.update(&op.shift, &op.features).unwrap();
            for i in 0..n {
                let za = a.sequence(perm[i]).unwrap();
                let zb = b.sequence(i).unwrap();
                prop_assert!(scaled_diff(za.as_flat(), zb.as_flat(), mag) <= 1e-12);
                let ua = params.forward_slice(za.as_flat()).unwrap();
                let ub = params.forward_slice(zb.as_flat()).unwrap();
                prop_assert!(scaled_diff(&ua, &ub, mag) <= 1e-12);
            }
        }
    }

    #[test]
    fn aggregation_is_local(seed in any::<u64>(), n in 3usize..10, k in 1usize..5, target in 0usize..10) {
        let target = target % n;
        let mut r = rng(seed);
        let steps = 8;
        let states = wandering_states(&mut r, n, steps);
        let graphs: Vec<CommGraph> = states.iter().map(|s| build_comm_graph(s, 1.2).unwrap()).collect();
        let xs: Vec<FeatureMatrix> = (0..steps).map(|_| random_features(&mut r, n, 3)).collect();
        let last = steps - 1;
        let mut masked = xs.clone();
        for kk in 0..k.min(steps) {
            let newest_first: Vec<CommGraph> = graphs[..=last].iter().rev().cloned().collect();
            let info = khop_neighborhood(&newest_first, target, kk).unwrap();
            for j in (0..n).filter(|j| !info.contains(j)) {
                masked[last - kk].row_mut(j).fill(0.0);
            }
        }
        let run = |xs: &[FeatureMatrix]| {
            let mut agg = AggregationState::new(n, 3, k).unwrap();
            for (g, x) in graphs.iter().zip(xs) {
                agg.update(&build_shift_operator(g, ShiftScheme::MeanNeighbor), x).unwrap();
            }
            agg.sequence(target).unwrap()
        };
        prop_assert!(run(&xs).max_abs_diff(&run(&masked)) <= 1e-15);
    }

    #[test]
    fn potential_gradient_matches_finite_differences(
        seed in any::<u64>(), d in 0.15f64..0.97, theta in 0.0f64..std::f64::consts::TAU
    ) {
        let p = PotentialParams::default();
        let r_i = Vec2::new(rng(seed).random_range(-3.0..3.0), 0.5);
        let r_j = r_i + Vec2::new(d * theta.cos(), d * theta.sin());
        let g = potential_gradient(r_i, r_j, &p);
        let h = 1e-6;
        let u = |ri: Vec2| potential(r_j - ri, &p);
        let fd = Vec2::new(
            (u(r_i + Vec2::new(h, 0.0)) - u(r_i - Vec2::new(h, 0.0))) / (2.0 * h),
            (u(r_i + Vec2::new(0.0, h)) - u(r_i - Vec2::new(0.0, h))) / (2.0 * h),
        );
        prop_assert!((g - fd).norm() / g.norm().max(fd.norm()) <= 1e-6, "g={:?} fd={:?}", g, fd);
    }

    #[test]
    fn potential_is_flat_beyond_cutoff(d in 1.01f64..10.0, theta in 0.0f64..std::f64::consts::TAU) {
        let p = PotentialParams::default();
        let r = Vec2::new(d * theta.cos(), d * theta.sin());
        prop_assert_eq!(potential_gradient(Vec2::ZERO, r, &p), Vec2::ZERO);
        prop_assert_eq!(potential(r, &p), 1.0);
    }

    #[test]
    fn action_sum_vanishes(seed in any::<u64>(), n in 2usize..15) {
        let mut r = rng(seed);
        let mut s = random_state(&mut r, n, 2.5, 3.0);
        // Keep pairs apart so gradient magnitudes stay moderate.
        for i in 0..n {
            s.positions[i] = Vec2::new(0.35 * i as f64, 0.0) + s.positions[i] * 0.2;
        }
        let u = global_controller(&s, &PotentialParams::default());
        let sum = u.sum();
        prop_assert!(sum.x.abs() <= 1e-9 && sum.y.abs() <= 1e-9, "{:?}", sum);
    }

    #[test]
    fn local_equals_global_when_complete(seed in any::<u64>(), n in 2usize..12) {
        let s = random_state(&mut rng(seed), n, 2.0, 3.0);
        let g = build_comm_graph(&s, 100.0).unwrap();
        prop_assume!(g.is_complete());
        let p = PotentialParams::default();
        let a = global_controller(&s, &p);
        let b = local_controller(&s, &g, &p);
        for (x, y) in a.0.iter().zip(&b.0) {
            prop_assert_eq!(x.x.to_bits(), y.x.to_bits());
            prop_assert_eq!(x.y.to_bits(), y.y.to_bits());
        }
    }

    #[test]
    fn local_controller_from_features(seed in any::<u64>(), n in 2usize..10) {
        let s = random_state(&mut rng(seed), n, 1.0, 2.0);
        let g = build_comm_graph(&s, 1.0).unwrap();
        let f = compute_features(&s, &g, 1e-3);
        let u = local_controller(&s, &g, &PotentialParams::default());
        for i in 0..n {
            let row = f.row(i);
            let ux = -row[0] - 2.0 * row[2] + 2.0 * row[4];
            let uy = -row[1] - 2.0 * row[3] + 2.0 * row[5];
            let scale = 1.0 + ux.abs().max(uy.abs());
            prop_assert!((ux - u.0[i].x).abs() <= 1e-9 * scale && (uy - u.0[i].y).abs() <= 1e-9 * scale);
        }
    }

    #[test]
    fn controllers_are_galilean_and_translation_invariant(
        seed in any::<u64>(), n in 2usize..10, wx in -5.0f64..5.0, wy in -5.0f64..5.0
    ) {
        let s = random_state(&mut rng(seed), n, 1.5, 2.0);
        let p = PotentialParams::default();
        let base = global_controller(&s, &p);
        let mut moved = s.clone();
        for v in &mut moved.velocities {
            *v += Vec2::new(wx, wy);
        }
        for r in &mut moved.positions {
            *r += Vec2::new(wy * 3.0, -wx);
        }
        let shifted = global_controller(&moved, &p);
        prop_assert!(base.max_abs_diff(&shifted) <= 1e-8 * (1.0 + base.0.iter().map(|u| u.norm()).fold(0.0, f64::max)));
    }

    #[test]
    fn integrator_galilean(seed in any::<u64>(), n in 2usize..10, wx in -3.0f64..3.0, wy in -3.0f64..3.0) {
        let mut r = rng(seed);
        let s = random_state(&mut r, n, 2.0, 2.0);
        let u = ActionMatrix((0..n).map(|_| Vec2::new(r.random_range(-5.0..5.0), r.random_range(-5.0..5.0))).collect());
        let w = Vec2::new(wx, wy);
        let mut sw = s.clone();
        for v in &mut sw.velocities {
            *v += w;
        }
        let a = step(&s, &u, 0.01).unwrap();
        let b = step(&sw, &u, 0.01).unwrap();
        for i in 0..n {
            prop_assert!(((b.positions[i] - a.positions[i]) - w * 0.01).norm() <= 1e-12);
            prop_assert!(((b.velocities[i] - a.velocities[i]) - w).norm() <= 1e-12);
        }
    }

    #[test]
    fn zero_action_conserves_energy(seed in any::<u64>(), n in 2usize..10, steps in 1usize..50) {
        let s0 = random_state(&mut rng(seed), n, 2.0, 3.0);
        let mut s = s0.clone();
        for _ in 0..steps {
            s = step(&s, &ActionMatrix::zeros(n), 0.01).unwrap();
        }
        prop_assert_eq!(&s.velocities, &s0.velocities);
        let e = |s: &aggflock::swarm::FlockState| s.velocities.iter().map(|v| 0.5 * v.norm_sq()).sum::<f64>();
        prop_assert_eq!(e(&s).to_bits(), e(&s0).to_bits());
    }

    #[test]
    fn model_bytes_round_trip(seed in any::<u64>(), k in 1usize..5, h1 in 1usize..20, h2 in 0usize..20) {
        let hidden = if h2 == 0 { vec![h1] } else { vec![h1, h2] };
        let arch = Architecture::flocking(k, hidden).unwrap();
        let p = init_params(&arch, &mut rng(seed)).unwrap();
        prop_assert!(decode_model(&encode_model(&p)).unwrap().bit_eq(&p));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn network_gradient_matches_finite_differences(
        seed in any::<u64>(), k in 1usize..4, p in 1usize..4, h in 1usize..7, depth in 0usize..3, batch in 1usize..5
    ) {
        let mut r = rng(seed);
        let arch = Architecture::new(k, p, vec![h; depth], 2).unwrap();
        let params = init_params(&arch, &mut r).unwrap();
        let d = arch.input_dim();
        let inputs: Vec<f64> = (0..batch * d).map(|_| r.random_range(-1.5..1.5)).collect();
        let targets: Vec<f64> = (0..batch * 2).map(|_| r.random_range(-2.0..2.0)).collect();
        let mb = Minibatch::new(d, 2, inputs, targets).unwrap();
        let (_, grad) = loss_and_gradient(&params, &mb).unwrap();
        let eps = 1e-6;
        let mut fd = Vec::with_capacity(grad.as_slice().len());
        for idx in 0..params.as_slice().len() {
            let mut plus = params.clone();
            plus.as_mut_slice()[idx] += eps;
            let mut minus = params.clone();
            minus.as_mut_slice()[idx] -= eps;
            fd.push((loss(&plus, &mb).unwrap() - loss(&minus, &mb).unwrap()) / (2.0 * eps));
        }
        let diff: f64 = grad.as_slice().iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = grad.as_slice().iter().map(|a| a * a).sum::<f64>().sqrt()
            .max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
        prop_assert!(scale == 0.0 || diff / scale <= 1e-5, "rel err {}", diff / scale);
    }
}

#[test]
fn adam_reduces_regression_loss() {
    let mut r = rng(11);
    let arch = Architecture::new(1, 3, vec![16], 2).unwrap();
    let mut params = init_params(&arch, &mut r).unwrap();
    let inputs: Vec<f64> = (0..64 * 3).map(|_| r.random_range(-1.0..1.0)).collect();
    let targets: Vec<f64> = inputs.chunks(3).flat_map(|x| [x[0] - 0.5 * x[1], x[2] * x[0]]).collect();
    let mb = Minibatch::new(3, 2, inputs, targets).unwrap();
    let before = loss(&params, &mb).unwrap();
    let mut adam = AdamState::new(
        &params,
        AdamConfig {
            learning_rate: 1e-2,
            ..AdamConfig::default()
        },
    );
    for _ in 0..300 {
        let (_, g) = loss_and_gradient(&params, &mb).unwrap();
        adam.step(&mut params, &g).unwrap();
    }
    let after = loss(&params, &mb).unwrap();
    assert!(after < 0.2 * before, "loss {before} -> {after}");
}

fn small_sim() -> SimConfig {
    SimConfig {
        n_agents: 8,
        ..SimConfig::default()
    }
}

#[test]
fn disc_init_is_reproducible_and_valid() {
    let cfg = SimConfig {
        n_agents: 60,
        ..SimConfig::default()
    };
    let a = init_flock_disc(&cfg, &mut stream(5, Purpose::Episode, 0)).unwrap();
    let b = init_flock_disc(&cfg, &mut stream(5, Purpose::Episode, 0)).unwrap();
    assert_eq!(a, b);
    let g = build_comm_graph(&a, cfg.comm_radius).unwrap();
    assert!(g.min_degree() >= 2);
    for i in 0..60 {
        assert!(a.positions[i].norm() <= 60f64.sqrt());
        for j in (i + 1)..60 {
            assert!((a.positions[i] - a.positions[j]).norm() >= 0.1);
        }
    }
}

#[test]
fn expert_labels_reproduce_from_recorded_states() {
    let sim = small_sim();
    let features = FeatureOptions::default();
    let spec = CollectSpec {
        sim: &sim,
        features: &features,
        history_depth: 2,
        traj_len: 40,
        trajectory_id: 3,
        record_states: true,
    };
    let arch = Architecture::flocking(2, vec![8]).unwrap();
    let learner = init_params(&arch, &mut rng(1)).unwrap();
    let mut r = stream(9, Purpose::Collect, 0);
    let initial = init_flock_disc(&sim, &mut r).unwrap();
    let schedule = DaggerSchedule {
        beta: 0.5,
        ..DaggerSchedule::default()
    };
    let (shard, stats) = collect_from(&spec, initial, Some(&learner), &schedule, &mut r).unwrap();
    assert!(stats.learner_steps > 0 && stats.expert_steps > 0);
    let p = PotentialParams::default();
    let mut pick = rng(2);
    for _ in 0..100 {
        let idx = pick.random_range(0..shard.len());
        let prov = shard.provenance(idx);
        let state = shard.state_of(idx).unwrap();
        let u = saturate(&global_controller(state, &p), sim.accel_limit);
        assert_eq!(u.0[prov.agent as usize], shard.label(idx));
    }
}

#[test]
fn pure_expert_collection_matches_expert_rollout() {
    let sim = small_sim();
    let features = FeatureOptions::default();
    let spec = CollectSpec {
        sim: &sim,
        features: &features,
        history_depth: 3,
        traj_len: 50,
        trajectory_id: 0,
        record_states: true,
    };
    let initial = init_flock_disc(&sim, &mut rng(4)).unwrap();
    let (shard, _) = collect_from(&spec, initial.clone(), None, &DaggerSchedule::default(), &mut rng(5)).unwrap();
    let log = run_episode(&initial, &ControllerSpec::Global, &sim, 50, &EpisodeOptions::default(), &mut rng(6)).unwrap();
    for t in 1..50 {
        let idx = t * sim.n_agents;
        assert_eq!(shard.state_of(idx).unwrap().positions, log.states[t - 1].positions);
        assert_eq!(shard.state_of(idx).unwrap().velocities, log.states[t - 1].velocities);
    }
}

#[test]
fn consensus_spacing_gives_zero_control_and_cost() {
    let positions: Vec<Vec2> = (0..9).map(|i| Vec2::new((i % 3) as f64 * 1.5, (i / 3) as f64 * 1.5)).collect();
    let s = aggflock::swarm::FlockState::new(positions, vec![Vec2::new(0.7, -1.2); 9]).unwrap();
    let u = global_controller(&s, &PotentialParams::default());
    assert!(u.0.iter().all(|&a| a == Vec2::ZERO));
    let cfg = SimConfig {
        n_agents: 9,
        ..SimConfig::default()
    };
    let log = run_episode(&s, &ControllerSpec::Global, &cfg, 30, &EpisodeOptions::default(), &mut rng(0)).unwrap();
    assert_eq!(velocity_variance_cost(&log), 0.0);
}

