use mfoml::baselines::{fictitious_play, online_mirror_descent, BaselineOptions};
use mfoml::dynamics::{assemble_polytope, forward_flow, normalize, TieBreak};
use mfoml::envs::{
    make_building_evacuation, make_sis, EvacuationParams, LinearGameSpec, RandomLinearParams, SisParams,
};
use mfoml::evaluation::{policy_value, solve_induced_mdp};
use mfoml::model::{uniform_policy, validate_model, Dims, MeanFieldFlow, MfgModel, Policy};
use mfoml::nplayer::{estimate_rewards, play_episode, sample_explore, NPlayerGame, TransitionCounts};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn linear_model(states: usize, actions: usize, horizon: usize, seed: u64, coupling_scale: f64) -> MfgModel {
    let params = RandomLinearParams { states, actions, horizon, seed, coupling_scale };
    LinearGameSpec::random(&params).unwrap().to_model().unwrap()
}

fn random_policy(dims: Dims, rng: &mut impl Rng) -> Policy {
    let mut p = Policy::from_fn(dims, |_, _, _| rng.random::<f64>() + 1e-3);
    for t in 0..dims.horizon {
        for s in 0..dims.states {
            let total: f64 = p.distribution(t, s).iter().sum();
            for a in 0..dims.actions {
                let v = p.prob(t, s, a) / total;
                p.set(t, s, a, v);
            }
        }
    }
    p
}

/// Any non-negative flow whose time slices each sum to one.
fn random_distribution_flow(dims: Dims, rng: &mut impl Rng) -> MeanFieldFlow {
    let mut values: Vec<f64> = (0..dims.flat_len()).map(|_| rng.random::<f64>()).collect();
    let block = dims.state_actions();
    for slice in values.chunks_mut(block) {
        let total: f64 = slice.iter().sum();
        slice.iter_mut().for_each(|v| *v /= total);
    }
    MeanFieldFlow::from_vec(dims, values).unwrap()
}

fn all_deterministic_policies(dims: Dims) -> Vec<Policy> {
    let slots = dims.horizon * dims.states;
    let count = dims.actions.pow(slots as u32);
    (0..count)
        .map(|mut code| {
            let mut choice = vec![0; slots];
            for c in choice.iter_mut() {
                *c = code % dims.actions;
                code /= dims.actions;
            }
            Policy::deterministic(dims, |t, s| choice[t * dims.states + s])
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn builtin_environments_validate(
        beta in 0.0f64..1.0,
        rho in 0.0f64..1.0,
        infected in 0.0f64..1.0,
        horizon in 1usize..8,
        floors in 1usize..4,
        side in 2usize..4,
        seed in any::<u64>(),
    ) {
        let sis = make_sis(&SisParams { beta, rho, horizon, mu0: [1.0 - infected, infected], ..SisParams::default() }).unwrap();
        prop_assert!(validate_model(&sis).is_valid());
        let evac = make_building_evacuation(&EvacuationParams {
            floors, length: side, width: side, horizon, ..EvacuationParams::default()
        }).unwrap();
        prop_assert!(validate_model(&evac).is_valid());
        prop_assert!(validate_model(&linear_model(3, 2, horizon, seed, 1.0)).is_valid());
    }

    #[test]
    fn uniform_policy_is_an_exact_simplex(s in 1usize..7, a in 1usize..7, t in 1usize..7) {
        let p = uniform_policy(s, a, t).unwrap();
        for ti in 0..t {
            for si in 0..s {
                prop_assert!((p.distribution(ti, si).iter().sum::<f64>() - 1.0).abs() <= 1e-15);
                prop_assert!(p.distribution(ti, si).iter().all(|&v| v == 1.0 / a as f64));
            }
        }
    }

    #[test]
    fn normalize_and_flow_map_are_inverse_both_ways(seed in any::<u64>(), s in 1usize..5, a in 1usize..4, t in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = linear_model(s, a, t, seed, 0.0);
        let pi = random_policy(model.dims(), &mut rng);
        let d = forward_flow(&pi, &model).unwrap();
        let back = normalize(&d, TieBreak::Policy(&pi)).unwrap();
        for (x, y) in back.as_slice().iter().zip(pi.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
        let again = forward_flow(&normalize(&d, TieBreak::Uniform).unwrap(), &model).unwrap();
        prop_assert!(again.l1_distance(&d) <= 1e-9);
    }

    #[test]
    fn each_time_block_has_one_signed_entry_per_state_action(s in 1usize..5, a in 1usize..4, t in 1usize..5, seed in any::<u64>()) {
        let model = linear_model(s, a, t, seed, 0.0);
        let poly = assemble_polytope(&model).unwrap();
        let dims = model.dims();
        let a_dense = poly.a_matrix().to_dense();
        for tb in 0..t {
            for si in 0..s {
                for ai in 0..a {
                    let col = dims.index(tb, si, ai);
                    // Step 0 pins mu0 in the last row block; later steps close the previous one.
                    let (row, sign) = if tb == 0 { ((t - 1) * s + si, 1.0) } else { ((tb - 1) * s + si, -1.0) };
                    prop_assert_eq!(a_dense[(row, col)], sign);
                    let z_rows = if tb == 0 { (t - 1) * s..t * s } else { (tb - 1) * s..tb * s };
                    let hits = z_rows.filter(|&r| a_dense[(r, col)] != 0.0).count();
                    prop_assert_eq!(hits, 1);
                }
            }
        }
    }

    #[test]
    fn induced_mdp_optimum_dominates_every_deterministic_policy(seed in any::<u64>(), s in 1usize..4, a in 1usize..3, t in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = linear_model(s, a, t, seed, 0.0);
        let l = random_distribution_flow(model.dims(), &mut rng);
        let sol = solve_induced_mdp(&model, &l).unwrap();
        let best = all_deterministic_policies(model.dims())
            .iter()
            .map(|p| policy_value(&model, p, &l).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((sol.optimal_value - best).abs() <= 1e-9 * (1.0 + best.abs()));
        let bound = t as f64 * model.r_max() + 1e-9;
        prop_assert!(sol.q_values.iter().all(|q| q.abs() <= bound));
    }

    #[test]
    fn mean_field_kernels_are_stochastic_for_any_anchor(
        seed in any::<u64>(),
        beta in 0.0f64..1.0,
        rho in 0.0f64..1.0,
        coupling in 0.0f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sis = make_sis(&SisParams { beta, rho, horizon: 6, ..SisParams::default() }).unwrap();
        let anchor = random_distribution_flow(sis.dims(), &mut rng);
        prop_assert!(sis.transitions_at(&anchor).unwrap().first_invalid_row(1e-12).is_none());
        let linear = linear_model(4, 3, 4, seed, coupling);
        let anchor = random_distribution_flow(linear.dims(), &mut rng);
        prop_assert!(linear.transitions_at(&anchor).unwrap().first_invalid_row(1e-12).is_none());
    }

    #[test]
    fn builders_are_deterministic(seed in any::<u64>()) {
        let a = linear_model(3, 3, 3, seed, 1.0);
        let b = linear_model(3, 3, 3, seed, 1.0);
        let flow = random_distribution_flow(a.dims(), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a.reward_table(&flow), b.reward_table(&flow));
        prop_assert_eq!(a.transitions_at(&flow).unwrap(), b.transitions_at(&flow).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn baselines_emit_simplex_policies_and_feasible_flows(seed in any::<u64>(), lr in 0.01f64..10.0) {
        let model = linear_model(3, 2, 4, seed, 0.0);
        let poly = assemble_polytope(&model).unwrap();
        let fp = fictitious_play(&model, 15, &BaselineOptions::default()).unwrap();
        let omd = online_mirror_descent(&model, 15, lr, &BaselineOptions::default()).unwrap();
        for rec in fp.records.iter().chain(&omd.records) {
            if let Some(p) = &rec.policy {
                prop_assert!(p.check_simplex(1e-9).is_ok());
            }
        }
        for rec in &fp.records {
            let flow = rec.flow.as_ref().unwrap();
            prop_assert!(flow.as_slice().iter().all(|&v| v >= 0.0));
            prop_assert!(poly.equality_residual(flow.as_slice()) <= 1e-9);
        }
    }

    #[test]
    fn empirical_flows_have_denominator_n(seed in any::<u64>(), n in 1usize..12) {
        let model = linear_model(3, 2, 4, seed, 1.0);
        let game = NPlayerGame::new(model, n, seed).unwrap();
        let pi = uniform_policy(3, 2, 4).unwrap();
        let out = play_episode(&game, &vec![pi; n], &mut game.episode_rng(0, 0)).unwrap();
        for slice in out.empirical_flow.chunks(6) {
            prop_assert!((slice.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for &v in slice {
                let scaled = v * n as f64;
                prop_assert!((scaled - scaled.round()).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn estimators_keep_defaults_where_unvisited(seed in any::<u64>(), n_k in 1usize..4) {
        let model = linear_model(4, 3, 3, seed, 1.0);
        let dims = model.dims();
        let game = NPlayerGame::new(model, 3, seed).unwrap();
        let pi = uniform_policy(4, 3, 3).unwrap();
        let batch = sample_explore(&game, &pi, n_k, 0).unwrap();
        let rewards = estimate_rewards(dims, &batch).unwrap();
        for (v, &c) in rewards.values.iter().zip(&rewards.counts) {
            if c == 0 {
                prop_assert_eq!(*v, 0.0);
            }
        }
        let mut counts = TransitionCounts::new(dims);
        counts.add_batch(&batch).unwrap();
        let p0 = [0.1, 0.2, 0.3, 0.4];
        let p_hat = counts.estimate(&p0).unwrap();
        for t in 0..dims.horizon - 1 {
            for s in 0..dims.states {
                for a in 0..dims.actions {
                    if counts.row_count(t, s, a) == 0 {
                        prop_assert_eq!(p_hat.row(t, s, a), &p0[..]);
                    }
                }
            }
        }
    }
}
