//! Fictitious Play and Online Mirror Descent, traced in the same record
//! format as the splitting solver.

use std::time::Instant;

use crate::dynamics::{mean_field_flow, normalize, TieBreak};
use crate::evaluation::{exploitability, policy_q_values, solve_induced_mdp};
use crate::model::{MfgModel, Policy};
use crate::solver::{due, IterationRecord, SolverError, SolverTrace, Termination, TraceBuilder};

/// Record-keeping knobs shared by the baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineOptions {
    pub exploitability_stride: usize,
    pub keep_iterates: bool,
    pub stop_exploitability: Option<f64>,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        Self {
            exploitability_stride: 1,
            keep_iterates: true,
            stop_exploitability: None,
        }
    }
}

struct Recorder<'a> {
    model: &'a MfgModel,
    options: BaselineOptions,
    iterations: usize,
    trace: TraceBuilder,
    start: Instant,
    excluded: f64,
}

impl<'a> Recorder<'a> {
    fn new(model: &'a MfgModel, options: BaselineOptions, iterations: usize) -> Self {
        Self {
            model,
            options,
            iterations,
            trace: TraceBuilder::new(options.keep_iterates),
            start: Instant::now(),
            excluded: 0.0,
        }
    }

    /// Records iterate `k`; returns true when the stop threshold is met.
    fn record(&mut self, k: usize, flow: &crate::model::MeanFieldFlow, policy: &Policy) -> Result<bool, SolverError> {
        let elapsed_s = (self.start.elapsed().as_secs_f64() - self.excluded).max(0.0);
        let want = due(k, self.options.exploitability_stride, k == self.iterations) || self.options.stop_exploitability.is_some();
        let expl = if want {
            let t0 = Instant::now();
            let e = exploitability(self.model, policy)?;
            self.excluded += t0.elapsed().as_secs_f64();
            Some(e)
        } else {
            None
        };
        self.trace.push(IterationRecord {
            iteration: k,
            flow: Some(flow.clone()),
            policy: Some(policy.clone()),
            exploitability: expl,
            elapsed_s: if k == 0 { 0.0 } else { elapsed_s },
            projection_iterations: 0,
        });
        Ok(matches!((self.options.stop_exploitability, expl), (Some(s), Some(e)) if e <= s))
    }

    fn finish(self, name: &str, termination: Termination) -> SolverTrace {
        self.trace.finish(name, self.model.is_mean_field_dependent(), termination)
    }
}

/// Fictitious Play: best respond to the averaged flow, then average in the
/// flow of the best response with weight `1/(k+1)`. The reported policy is
/// `normalize` of the averaged flow.
pub fn fictitious_play(model: &MfgModel, iterations: usize, options: &BaselineOptions) -> Result<SolverTrace, SolverError> {
    let d = model.dims();
    let mut rec = Recorder::new(model, *options, iterations);
    let uniform = crate::model::uniform_policy(d.states, d.actions, d.horizon)?;
    let mut avg = mean_field_flow(&uniform, model)?;
    if rec.record(0, &avg, &uniform)? {
        return Ok(rec.finish("fp", Termination::Converged));
    }
    for k in 0..iterations {
        let br = solve_induced_mdp(model, &avg)?.optimal_policy;
        let flow = mean_field_flow(&br, model)?;
        let w = 1.0 / (k as f64 + 1.0);
        for (a, f) in avg.as_mut_slice().iter_mut().zip(flow.as_slice()) {
            *a = (1.0 - w) * *a + w * f;
        }
        let policy = normalize(&avg, TieBreak::Uniform)?;
        if rec.record(k + 1, &avg, &policy)? {
            return Ok(rec.finish("fp", Termination::Converged));
        }
    }
    Ok(rec.finish("fp", Termination::BudgetExhausted))
}

/// Online Mirror Descent: accumulate `learning_rate * Q^{pi}(L^{pi})` and play
/// the softmax of the running sum.
pub fn online_mirror_descent(
    model: &MfgModel,
    iterations: usize,
    learning_rate: f64,
    options: &BaselineOptions,
) -> Result<SolverTrace, SolverError> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(SolverError::InvalidSchedule(format!("learning rate must be positive, got {learning_rate}")));
    }
    let d = model.dims();
    let mut rec = Recorder::new(model, *options, iterations);
    let mut cumulative = vec![0.0; d.flat_len()];
    let mut policy = crate::model::uniform_policy(d.states, d.actions, d.horizon)?;
    let mut flow = mean_field_flow(&policy, model)?;
    if rec.record(0, &flow, &policy)? {
        return Ok(rec.finish("omd", Termination::Converged));
    }
    for k in 0..iterations {
        let q = policy_q_values(model, &policy, &flow)?;
        for (c, v) in cumulative.iter_mut().zip(&q) {
            *c += learning_rate * v;
        }
        policy = softmax_policy(d, &cumulative);
        flow = mean_field_flow(&policy, model)?;
        if rec.record(k + 1, &flow, &policy)? {
            return Ok(rec.finish("omd", Termination::Converged));
        }
    }
    Ok(rec.finish("omd", Termination::BudgetExhausted))
}

fn softmax_policy(d: crate::model::Dims, scores: &[f64]) -> Policy {
    let mut p = Policy::from_fn(d, |_, _, _| 0.0);
    let mut buf = vec![0.0; d.actions];
    for t in 0..d.horizon {
        for s in 0..d.states {
            let max = (0..d.actions).map(|a| scores[d.index(t, s, a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (a, b) in buf.iter_mut().enumerate() {
                *b = (scores[d.index(t, s, a)] - max).exp();
                z += *b;
            }
            for (a, b) in buf.iter().enumerate() {
                p.set(t, s, a, b / z);
            }
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{assemble_polytope, forward_flow};
    use crate::model::{uniform_policy, Dims, MeanFieldFlow, Transition, TransitionTensor};
    use crate::random::{congestion_model, decoupled_model};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn fp_solves_decoupled_game_immediately() {
        let dims = Dims::new(3, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = decoupled_model(dims, &mut rng);
        let trace = fictitious_play(&m, 2, &BaselineOptions::default()).unwrap();
        assert!(trace.final_exploitability().unwrap() <= 1e-10);
        assert!(trace.records[1].exploitability.unwrap() <= 1e-10);
    }

    #[test]
    fn fp_averages_toward_uniform_congestion_equilibrium() {
        let dims = Dims::new(2, 2, 1).unwrap();
        let m = MfgModel::new(
            dims,
            vec![0.5, 0.5],
            Arc::new(move |_, s, a, l| -l[dims.block_index(s, a)]),
            Transition::Fixed(TransitionTensor::constant(dims, &[0.5, 0.5]).unwrap()),
            1.0,
        )
        .unwrap();
        let options = BaselineOptions {
            exploitability_stride: 0,
            keep_iterates: false,
            stop_exploitability: None,
        };
        let trace = fictitious_play(&m, 10_000, &options).unwrap();
        for v in trace.final_flow().as_slice() {
            assert!((v - 0.25).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn fp_average_stays_in_polytope() {
        let dims = Dims::new(3, 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = congestion_model(dims, 0.5, &mut rng);
        let poly = assemble_polytope(&m).unwrap();
        let trace = fictitious_play(&m, 30, &BaselineOptions::default()).unwrap();
        for r in &trace.records {
            assert!(poly.equality_residual(r.flow.as_ref().unwrap().as_slice()) < 1e-9);
            r.policy.as_ref().unwrap().check_simplex(1e-12).unwrap();
        }
    }

    #[test]
    fn omd_with_zero_rewards_stays_uniform() {
        let dims = Dims::new(2, 3, 3).unwrap();
        let m = MfgModel::new(
            dims,
            vec![0.5, 0.5],
            Arc::new(|_, _, _, _| 0.0),
            Transition::Fixed(TransitionTensor::constant(dims, &[0.5, 0.5]).unwrap()),
            1.0,
        )
        .unwrap();
        let trace = online_mirror_descent(&m, 20, 1.0, &BaselineOptions::default()).unwrap();
        let uniform = uniform_policy(2, 3, 3).unwrap();
        for r in &trace.records {
            assert_eq!(r.policy.as_ref().unwrap(), &uniform);
        }
    }

    #[test]
    fn omd_mass_on_optimal_action_grows_monotonically() {
        // One state, action 0 strictly better at every step.
        let dims = Dims::new(1, 3, 2).unwrap();
        let m = MfgModel::new(
            dims,
            vec![1.0],
            Arc::new(|_, _, a, _| [1.0, 0.2, -0.5][a]),
            Transition::Fixed(TransitionTensor::constant(dims, &[1.0]).unwrap()),
            1.0,
        )
        .unwrap();
        let trace = online_mirror_descent(&m, 40, 0.5, &BaselineOptions::default()).unwrap();
        let masses: Vec<f64> = trace.records.iter().map(|r| r.policy.as_ref().unwrap().prob(0, 0, 0)).collect();
        assert!(masses.windows(2).all(|w| w[1] > w[0]));
        assert!(*masses.last().unwrap() > 0.999);
    }

    #[test]
    fn baselines_reduce_exploitability_on_congestion() {
        let dims = Dims::new(3, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = congestion_model(dims, 1.0, &mut rng);
        let fp = fictitious_play(&m, 200, &BaselineOptions::default()).unwrap();
        let omd = online_mirror_descent(&m, 200, 0.5, &BaselineOptions::default()).unwrap();
        for trace in [&fp, &omd] {
            assert!(trace.final_exploitability().unwrap() < trace.records[0].exploitability.unwrap());
            assert!(trace.final_exploitability().unwrap() < 0.05, "{}", trace.algorithm);
        }
        let flow: MeanFieldFlow = forward_flow(omd.final_policy(), &m).unwrap();
        assert!(flow.l1_distance(omd.final_flow()) < 1e-12);
    }

    #[test]
    fn omd_rejects_bad_learning_rate() {
        let dims = Dims::new(1, 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = decoupled_model(dims, &mut rng);
        assert!(online_mirror_descent(&m, 1, 0.0, &BaselineOptions::default()).is_err());
    }
}
