//! Best responses, policy values and exploitability by backward induction on
//! the MDP induced by a fixed flow, plus empirical probes for the Lipschitz
//! and monotonicity constants of a reward.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{mean_field_flow, propagate};
use crate::model::{Dims, MeanFieldFlow, MfgModel, ModelError, Policy, TransitionTensor};
use crate::random::random_policy;

/// Optimal values and a greedy deterministic policy of an induced MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedMdpSolution {
    pub optimal_value: f64,
    pub optimal_policy: Policy,
    /// Flat `T x S x A` layout, same indexing as flows.
    pub q_values: Vec<f64>,
    /// `state_values[t * S + s]`.
    pub state_values: Vec<f64>,
    dims: Dims,
}

impl InducedMdpSolution {
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn q(&self, t: usize, s: usize, a: usize) -> f64 {
        self.q_values[self.dims.index(t, s, a)]
    }

    pub fn v(&self, t: usize, s: usize) -> f64 {
        self.state_values[t * self.dims.states + s]
    }
}

/// Finite-horizon backward induction for rewards `r` (flat layout) and kernel
/// `p`. Ties go to the lowest action index.
pub fn backward_induction(dims: Dims, mu0: &[f64], r: &[f64], p: &TransitionTensor) -> InducedMdpSolution {
    let (s_n, a_n, horizon) = (dims.states, dims.actions, dims.horizon);
    let mut q = vec![0.0; dims.flat_len()];
    let mut v = vec![0.0; s_n * horizon];
    let mut choice = vec![0usize; s_n * horizon];
    for t in (0..horizon).rev() {
        for s in 0..s_n {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for a in 0..a_n {
                let mut value = r[dims.index(t, s, a)];
                if t + 1 < horizon {
                    let next = &v[(t + 1) * s_n..(t + 2) * s_n];
                    value += p.row(t, s, a).iter().zip(next).map(|(x, y)| x * y).sum::<f64>();
                }
                q[dims.index(t, s, a)] = value;
                if value > best {
                    best = value;
                    arg = a;
                }
            }
            v[t * s_n + s] = best;
            choice[t * s_n + s] = arg;
        }
    }
    let optimal_value = mu0.iter().zip(&v[..s_n]).map(|(m, x)| m * x).sum();
    let optimal_policy = Policy::deterministic(dims, |t, s| choice[t * s_n + s]);
    InducedMdpSolution {
        optimal_value,
        optimal_policy,
        q_values: q,
        state_values: v,
        dims,
    }
}

/// Q-values of a fixed policy (flat layout) in the MDP with rewards `r`.
pub fn policy_evaluation(dims: Dims, r: &[f64], p: &TransitionTensor, policy: &Policy) -> Vec<f64> {
    let (s_n, a_n, horizon) = (dims.states, dims.actions, dims.horizon);
    let mut q = vec![0.0; dims.flat_len()];
    let mut v_next = vec![0.0; s_n];
    let mut v = vec![0.0; s_n];
    for t in (0..horizon).rev() {
        for s in 0..s_n {
            let mut vs = 0.0;
            for a in 0..a_n {
                let mut value = r[dims.index(t, s, a)];
                if t + 1 < horizon {
                    value += p.row(t, s, a).iter().zip(&v_next).map(|(x, y)| x * y).sum::<f64>();
                }
                q[dims.index(t, s, a)] = value;
                vs += policy.prob(t, s, a) * value;
            }
            v[s] = vs;
        }
        std::mem::swap(&mut v, &mut v_next);
    }
    q
}

fn check_flow(model: &MfgModel, l: &MeanFieldFlow) -> Result<(), ModelError> {
    if l.dims() != model.dims() {
        return Err(ModelError::DimsMismatch {
            left: model.dims(),
            right: l.dims(),
        });
    }
    Ok(())
}

/// Solves the MDP induced by `l`. Mean-field dependent kernels are anchored at `l`.
pub fn solve_induced_mdp(model: &MfgModel, l: &MeanFieldFlow) -> Result<InducedMdpSolution, ModelError> {
    check_flow(model, l)?;
    let p = model.transitions_at(l)?;
    let r = model.reward_table(l);
    Ok(backward_induction(model.dims(), model.mu0(), &r, &p))
}

/// Expected total reward of `policy` in the MDP induced by `l`, computed as
/// `R(l) . Gamma(policy)`.
pub fn policy_value(model: &MfgModel, policy: &Policy, l: &MeanFieldFlow) -> Result<f64, ModelError> {
    check_flow(model, l)?;
    if policy.dims() != model.dims() {
        return Err(ModelError::DimsMismatch {
            left: model.dims(),
            right: policy.dims(),
        });
    }
    let p = model.transitions_at(l)?;
    let occupation = propagate(policy, model.mu0(), &p);
    let r = model.reward_table(l);
    Ok(r.iter().zip(occupation.as_slice()).map(|(x, y)| x * y).sum())
}

/// Q-values of `policy` itself in the MDP induced by `l`.
pub fn policy_q_values(model: &MfgModel, policy: &Policy, l: &MeanFieldFlow) -> Result<Vec<f64>, ModelError> {
    check_flow(model, l)?;
    let p = model.transitions_at(l)?;
    let r = model.reward_table(l);
    Ok(policy_evaluation(model.dims(), &r, &p, policy))
}

/// Exploitability together with the quantities it is built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ExploitabilityReport {
    pub exploitability: f64,
    pub best_response_value: f64,
    pub policy_value: f64,
    pub flow: MeanFieldFlow,
    /// Set for mean-field dependent dynamics, where the number comes from the
    /// anchored-kernel heuristic rather than an exact evaluation.
    pub heuristic: bool,
}

pub fn exploitability_report(model: &MfgModel, policy: &Policy) -> Result<ExploitabilityReport, ModelError> {
    let flow = mean_field_flow(policy, model)?;
    let best = solve_induced_mdp(model, &flow)?;
    let value = policy_value(model, policy, &flow)?;
    Ok(ExploitabilityReport {
        exploitability: (best.optimal_value - value).max(0.0),
        best_response_value: best.optimal_value,
        policy_value: value,
        flow,
        heuristic: model.is_mean_field_dependent(),
    })
}

/// `max_pi' V^{pi'}(L^pi) - V^pi(L^pi)`, clamped at zero.
pub fn exploitability(model: &MfgModel, policy: &Policy) -> Result<f64, ModelError> {
    exploitability_report(model, policy).map(|r| r.exploitability)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub estimated_c_r: f64,
    pub estimated_lambda: f64,
    pub num_samples: usize,
    /// Pair of flows attaining the reported extreme ratio.
    pub worst_violation_pair: Option<(MeanFieldFlow, MeanFieldFlow)>,
}

struct ProbeSample {
    c_r: f64,
    lambda: f64,
}

fn probe_pair(model: &MfgModel, l1: &MeanFieldFlow, l2: &MeanFieldFlow) -> Option<ProbeSample> {
    let d = model.dims();
    let r1 = model.reward_table(l1);
    let r2 = model.reward_table(l2);
    let dist2: f64 = l1.as_slice().iter().zip(l2.as_slice()).map(|(x, y)| (x - y).powi(2)).sum();
    if dist2 < 1e-24 {
        return None;
    }
    let inner: f64 = r1
        .iter()
        .zip(&r2)
        .zip(l1.as_slice().iter().zip(l2.as_slice()))
        .map(|((a, b), (x, y))| (a - b) * (x - y))
        .sum();
    let mut c_r = 0.0f64;
    for t in 0..d.horizon {
        let l1_norm: f64 = l1.at(t).iter().zip(l2.at(t)).map(|(x, y)| (x - y).abs()).sum();
        if l1_norm < 1e-12 {
            continue;
        }
        for a in 0..d.actions {
            for s in 0..d.states {
                let i = d.index(t, s, a);
                c_r = c_r.max((r1[i] - r2[i]).abs() / l1_norm);
            }
        }
    }
    Some(ProbeSample {
        c_r,
        lambda: -inner / dist2,
    })
}

fn run_probe(model: &MfgModel, num_pairs: usize, seed: u64, want_lambda: bool) -> Result<ProbeReport, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.dims();
    let mut c_r = 0.0f64;
    let mut lambda = f64::INFINITY;
    let mut worst = None;
    let mut samples = 0;
    for _ in 0..num_pairs {
        let l1 = mean_field_flow(&random_policy(d, &mut rng), model)?;
        let l2 = mean_field_flow(&random_policy(d, &mut rng), model)?;
        let Some(sample) = probe_pair(model, &l1, &l2) else {
            continue;
        };
        samples += 1;
        let record = if want_lambda { sample.lambda < lambda } else { sample.c_r > c_r };
        c_r = c_r.max(sample.c_r);
        lambda = lambda.min(sample.lambda);
        if record {
            worst = Some((l1, l2));
        }
    }
    if samples == 0 {
        lambda = 0.0;
    }
    Ok(ProbeReport {
        estimated_c_r: c_r,
        estimated_lambda: lambda,
        num_samples: samples,
        worst_violation_pair: worst,
    })
}

/// Smallest observed `-<R(L1) - R(L2), L1 - L2> / ||L1 - L2||^2` over flows
/// induced by Dirichlet-random policies. Negative values flag non-monotonicity.
pub fn monotonicity_probe(model: &MfgModel, num_pairs: usize, seed: u64) -> Result<ProbeReport, ModelError> {
    run_probe(model, num_pairs, seed, true)
}

/// Largest observed `|R_t(s,a,L1) - R_t(s,a,L2)| / ||L1_t - L2_t||_1`.
pub fn lipschitz_probe(model: &MfgModel, num_pairs: usize, seed: u64) -> Result<ProbeReport, ModelError> {
    run_probe(model, num_pairs, seed, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{forward_flow, normalize, TieBreak};
    use crate::model::{uniform_policy, Transition};
    use crate::random::{congestion_model, decoupled_model, dirichlet, random_transitions};
    use proptest::prelude::*;
    use rand::Rng;
    use std::sync::Arc;

    fn with_reward(dims: Dims, seed: u64, r: impl Fn(usize, usize, usize, &[f64]) -> f64 + Send + Sync + 'static) -> MfgModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_transitions(dims, &mut rng);
        let mu0 = dirichlet(dims.states, &mut rng);
        MfgModel::new(dims, mu0, Arc::new(r), Transition::Fixed(p), 1.0).unwrap()
    }

    /// Value of a deterministic policy by explicit forward simulation of
    /// state distributions; written independently of `propagate`.
    fn deterministic_value(model: &MfgModel, choice: &[usize], l: &MeanFieldFlow) -> f64 {
        let d = model.dims();
        let p = model.fixed_transitions().unwrap();
        let mut mu = model.mu0().to_vec();
        let mut total = 0.0;
        for t in 0..d.horizon {
            let mut next = vec![0.0; d.states];
            for s in 0..d.states {
                let a = choice[t * d.states + s];
                total += mu[s] * model.reward(t, s, a, l.at(t));
                if t + 1 < d.horizon {
                    for (n, q) in next.iter_mut().zip(p.row(t, s, a)) {
                        *n += mu[s] * q;
                    }
                }
            }
            mu = next;
        }
        total
    }

    #[test]
    fn zero_rewards_give_zero_value() {
        let dims = Dims::new(2, 2, 3).unwrap();
        let m = with_reward(dims, 1, |_, _, _, _| 0.0);
        let l = forward_flow(&uniform_policy(2, 2, 3).unwrap(), &m).unwrap();
        let sol = solve_induced_mdp(&m, &l).unwrap();
        assert_eq!(sol.optimal_value, 0.0);
        assert_eq!(policy_value(&m, &uniform_policy(2, 2, 3).unwrap(), &l).unwrap(), 0.0);
    }

    #[test]
    fn single_step_argmax() {
        let dims = Dims::new(1, 2, 1).unwrap();
        let m = MfgModel::new(
            dims,
            vec![1.0],
            Arc::new(|_, _, a, _| if a == 0 { 1.0 } else { 3.0 }),
            Transition::Fixed(TransitionTensor::constant(dims, &[1.0]).unwrap()),
            3.0,
        )
        .unwrap();
        let l = MeanFieldFlow::from_vec(dims, vec![0.5, 0.5]).unwrap();
        let sol = solve_induced_mdp(&m, &l).unwrap();
        assert_eq!(sol.optimal_value, 3.0);
        assert_eq!(sol.optimal_policy.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn ties_go_to_lowest_action() {
        let dims = Dims::new(1, 3, 1).unwrap();
        let m = MfgModel::new(
            dims,
            vec![1.0],
            Arc::new(|_, _, a, _| if a == 0 { 0.0 } else { 1.0 }),
            Transition::Fixed(TransitionTensor::constant(dims, &[1.0]).unwrap()),
            1.0,
        )
        .unwrap();
        let l = MeanFieldFlow::from_vec(dims, vec![1.0 / 3.0; 3]).unwrap();
        let sol = solve_induced_mdp(&m, &l).unwrap();
        assert_eq!(sol.optimal_policy.as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_induction_matches_enumeration() {
        let dims = Dims::new(2, 2, 3).unwrap();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = congestion_model(dims, 0.7, &mut rng);
            let l = forward_flow(&random_policy(dims, &mut rng), &m).unwrap();
            let sol = solve_induced_mdp(&m, &l).unwrap();
            let cells = dims.states * dims.horizon;
            let mut best = f64::NEG_INFINITY;
            for code in 0..dims.actions.pow(cells as u32) {
                let choice: Vec<usize> = (0..cells).map(|i| (code / dims.actions.pow(i as u32)) % dims.actions).collect();
                best = best.max(deterministic_value(&m, &choice, &l));
            }
            assert!((sol.optimal_value - best).abs() < 1e-12);
            for t in 0..dims.horizon {
                for s in 0..dims.states {
                    let max_q = (0..dims.actions).map(|a| sol.q(t, s, a)).fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(sol.v(t, s), max_q);
                    for a in 0..dims.actions {
                        if sol.optimal_policy.prob(t, s, a) > 0.0 {
                            assert_eq!(sol.q(t, s, a), max_q);
                        }
                        assert!(sol.q(t, s, a).abs() <= dims.horizon as f64 * m.r_max());
                    }
                }
            }
        }
    }

    #[test]
    fn optimal_policy_value_matches_optimal_value() {
        let dims = Dims::new(3, 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = congestion_model(dims, 0.4, &mut rng);
        let l = forward_flow(&random_policy(dims, &mut rng), &m).unwrap();
        let sol = solve_induced_mdp(&m, &l).unwrap();
        let v = policy_value(&m, &sol.optimal_policy, &l).unwrap();
        assert!((v - sol.optimal_value).abs() < 1e-10);
    }

    #[test]
    fn policy_value_matches_monte_carlo() {
        let dims = Dims::new(2, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = congestion_model(dims, 0.5, &mut rng);
        let pi = random_policy(dims, &mut rng);
        let l = forward_flow(&random_policy(dims, &mut rng), &m).unwrap();
        let exact = policy_value(&m, &pi, &l).unwrap();
        let p = m.fixed_transitions().unwrap();
        let sample = |rng: &mut ChaCha8Rng, probs: &[f64]| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, q) in probs.iter().enumerate() {
                acc += q;
                if u < acc {
                    return i;
                }
            }
            probs.len() - 1
        };
        let episodes = 1_000_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..episodes {
            let mut s = sample(&mut rng, m.mu0());
            let mut g = 0.0;
            for t in 0..dims.horizon {
                let a = sample(&mut rng, &pi.distribution(t, s));
                g += m.reward(t, s, a, l.at(t));
                if t + 1 < dims.horizon {
                    s = sample(&mut rng, p.row(t, s, a));
                }
            }
            sum += g;
            sum_sq += g * g;
        }
        let mean = sum / episodes as f64;
        let se = ((sum_sq / episodes as f64 - mean * mean) / episodes as f64).sqrt();
        assert!((mean - exact).abs() <= 3.0 * se, "mc {mean} exact {exact} se {se}");
    }

    #[test]
    fn decoupled_game_optimum_has_zero_exploitability() {
        let dims = Dims::new(3, 3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = decoupled_model(dims, &mut rng);
        let l = forward_flow(&uniform_policy(3, 3, 4).unwrap(), &m).unwrap();
        let sol = solve_induced_mdp(&m, &l).unwrap();
        assert!(exploitability(&m, &sol.optimal_policy).unwrap() < 1e-10);
    }

    #[test]
    fn uniform_policy_gap_matches_hand_computation() {
        // Two steps, one state, reward 1 for action 0 and 0 for action 1:
        // best response earns 2, uniform earns 1.
        let dims = Dims::new(1, 2, 2).unwrap();
        let m = MfgModel::new(
            dims,
            vec![1.0],
            Arc::new(|_, _, a, _| if a == 0 { 1.0 } else { 0.0 }),
            Transition::Fixed(TransitionTensor::constant(dims, &[1.0]).unwrap()),
            1.0,
        )
        .unwrap();
        let e = exploitability(&m, &uniform_policy(1, 2, 2).unwrap()).unwrap();
        assert!((e - 1.0).abs() < 1e-15);

        // Two states: action 0 moves to the rewarding state 1 (reward 1 per
        // step there), action 1 stays. From state 0 at t=0 with T=2:
        // best = 0 + 1 = 1; uniform = 0 + 0.5 * 1 + 0.5 * 0 = 0.5.
        let dims = Dims::new(2, 2, 2).unwrap();
        let p = TransitionTensor::from_fn(dims, |_, s, a, out| {
            out.fill(0.0);
            out[if a == 0 { 1 } else { s }] = 1.0;
        });
        let m = MfgModel::new(dims, vec![1.0, 0.0], Arc::new(|_, s, _, _| s as f64), Transition::Fixed(p), 1.0).unwrap();
        let e = exploitability(&m, &uniform_policy(2, 2, 2).unwrap()).unwrap();
        assert!((e - 0.5).abs() < 1e-15);
    }

    #[test]
    fn policy_q_values_average_to_policy_value() {
        let dims = Dims::new(3, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = congestion_model(dims, 0.3, &mut rng);
        let pi = random_policy(dims, &mut rng);
        let l = forward_flow(&pi, &m).unwrap();
        let q = policy_q_values(&m, &pi, &l).unwrap();
        let v: f64 = (0..dims.states)
            .map(|s| m.mu0()[s] * (0..dims.actions).map(|a| pi.prob(0, s, a) * q[dims.index(0, s, a)]).sum::<f64>())
            .sum();
        assert!((v - policy_value(&m, &pi, &l).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn probes_on_coordinate_rewards() {
        let dims = Dims::new(2, 2, 2).unwrap();
        let m = with_reward(dims, 2, |_, s, a, l| -l[a * 2 + s]);
        let report = monotonicity_probe(&m, 200, 1).unwrap();
        assert!(report.estimated_lambda >= 1.0 - 1e-9);
        assert!(report.worst_violation_pair.is_some());
        let report = lipschitz_probe(&m, 200, 1).unwrap();
        assert!(report.estimated_c_r > 0.0 && report.estimated_c_r <= 1.0 + 1e-12);

        let m = with_reward(dims, 2, |_, s, a, l| l[a * 2 + s]);
        assert!(monotonicity_probe(&m, 200, 1).unwrap().estimated_lambda <= -1.0 + 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = decoupled_model(dims, &mut rng);
        assert_eq!(lipschitz_probe(&m, 50, 3).unwrap().estimated_c_r, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn exploitability_is_nonnegative(seed in 0u64..10_000) {
            let dims = Dims::new(3, 2, 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = congestion_model(dims, 0.8, &mut rng);
            let pi = random_policy(dims, &mut rng);
            prop_assert!(exploitability(&m, &pi).unwrap() >= 0.0);
        }

        #[test]
        fn exploitability_is_lipschitz_in_occupation(seed in 0u64..10_000) {
            let dims = Dims::new(3, 2, 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = congestion_model(dims, 0.8, &mut rng);
            let d1 = forward_flow(&random_policy(dims, &mut rng), &m).unwrap();
            let d2 = forward_flow(&random_policy(dims, &mut rng), &m).unwrap();
            let e1 = exploitability(&m, &normalize(&d1, TieBreak::Uniform).unwrap()).unwrap();
            let e2 = exploitability(&m, &normalize(&d2, TieBreak::Uniform).unwrap()).unwrap();
            let c_r = m.lipschitz_c_r().unwrap();
            let bound = (2.0 * dims.horizon as f64 * c_r + m.r_max()) * d1.l1_distance(&d2);
            prop_assert!((e1 - e2).abs() <= bound + 1e-6);
        }
    }
}
