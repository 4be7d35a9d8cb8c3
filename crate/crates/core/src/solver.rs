//! Forward-backward splitting on occupation measures: a gradient step on the
//! negated reward followed by a Euclidean projection onto the flow polytope.

use std::time::Instant;

use thiserror::Error;

use crate::dynamics::{assemble_polytope_at, mean_field_flow, normalize, FlowPolytope, TieBreak};
use crate::evaluation::exploitability;
use crate::model::{Dims, MeanFieldFlow, MfgModel, ModelError, Policy, TransitionTensor, SOLVER_TOL};
use crate::projection::{ProjectionError, ProjectionSettings, ProjectionWorkspace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("lambda = 0 requires a target accuracy epsilon")]
    MissingEpsilon,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("projection failed at iteration {iteration}: {source}")]
    Projection {
        iteration: usize,
        #[source]
        source: ProjectionError,
    },
    #[error("oracle output rejected at iteration {iteration}: {reason}")]
    InvalidOracle { iteration: usize, reason: String },
}

/// `c(L)`: negated rewards in flat layout.
pub fn cost_vector(model: &MfgModel, l: &MeanFieldFlow) -> Vec<f64> {
    let mut c = model.reward_table(l);
    c.iter_mut().for_each(|v| *v = -*v);
    c
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSchedule {
    pub alpha: f64,
    pub eta: f64,
    pub max_iterations: usize,
    pub stop_exploitability: Option<f64>,
}

impl SolverSchedule {
    pub fn new(alpha: f64, eta: f64, max_iterations: usize) -> Result<Self, SolverError> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(SolverError::InvalidSchedule(format!("alpha must be positive, got {alpha}")));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(SolverError::InvalidSchedule(format!("eta must be nonnegative, got {eta}")));
        }
        Ok(Self {
            alpha,
            eta,
            max_iterations,
            stop_exploitability: None,
        })
    }

    pub fn with_stop(mut self, threshold: f64) -> Self {
        self.stop_exploitability = Some(threshold);
        self
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }
}

/// Step size and perturbation from the convergence theory.
///
/// With `lambda > 0`: `alpha = lambda / (2 C_R^2 S^2 A^2)`, `eta = 0`.
/// With `lambda = 0`: `alpha = eps / (8 C_R^2 S^2 A^2 T + eps^2 / (2T))`,
/// `eta = eps / (4T)`.
pub fn derive_schedule(
    c_r: f64,
    states: usize,
    actions: usize,
    horizon: usize,
    lambda: f64,
    epsilon: Option<f64>,
) -> Result<SolverSchedule, SolverError> {
    if !(c_r > 0.0 && c_r.is_finite()) {
        return Err(SolverError::InvalidSchedule(format!("C_R must be positive, got {c_r}")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(SolverError::InvalidSchedule(format!("lambda must be nonnegative, got {lambda}")));
    }
    let sa2 = (states * actions) as f64 * (states * actions) as f64;
    let base = c_r * c_r * sa2;
    if lambda > 0.0 {
        return SolverSchedule::new(lambda / (2.0 * base), 0.0, 1000);
    }
    let eps = epsilon.ok_or(SolverError::MissingEpsilon)?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(SolverError::InvalidSchedule(format!("epsilon must be positive, got {eps}")));
    }
    let t = horizon as f64;
    SolverSchedule::new(eps / (8.0 * base * t + eps * eps / (2.0 * t)), eps / (4.0 * t), 1000)
}

/// Contraction factor `kappa = lambda^2 / (2 C_R^2 S^2 A^2)` of the strongly monotone case.
pub fn contraction_kappa(c_r: f64, states: usize, actions: usize, lambda: f64) -> f64 {
    let sa = (states * actions) as f64;
    lambda * lambda / (2.0 * c_r * c_r * sa * sa)
}

/// Where the constraint matrix of mean-field dependent dynamics is anchored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnchorRule {
    /// At the gradient point `d - alpha (c(d) + eta d)`. The gradient point
    /// can leave the simplex, which makes the anchored dynamics a poor
    /// approximation and the iteration may stall.
    GradientPoint,
    /// At the current iterate `d`.
    #[default]
    Iterate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub projection: ProjectionSettings,
    /// Exploitability is evaluated every `stride` iterations and at the end;
    /// 0 disables it except at the end.
    pub exploitability_stride: usize,
    pub anchor: AnchorRule,
    /// Keep flow and policy of every iterate; otherwise only the last.
    pub keep_iterates: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            projection: ProjectionSettings::default(),
            exploitability_stride: 1,
            anchor: AnchorRule::default(),
            keep_iterates: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub flow: Option<MeanFieldFlow>,
    pub policy: Option<Policy>,
    pub exploitability: Option<f64>,
    /// Cumulative solver time, excluding exploitability evaluation.
    pub elapsed_s: f64,
    pub projection_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverTrace {
    pub algorithm: String,
    pub records: Vec<IterationRecord>,
    /// Mean-field dependent dynamics were handled by the anchoring heuristic.
    pub heuristic_dynamics: bool,
    pub termination: Termination,
}

impl SolverTrace {
    pub fn last(&self) -> &IterationRecord {
        self.records.last().expect("a trace always holds the initial record")
    }

    pub fn final_flow(&self) -> &MeanFieldFlow {
        self.last().flow.as_ref().expect("the last record always keeps its iterate")
    }

    pub fn final_policy(&self) -> &Policy {
        self.last().policy.as_ref().expect("the last record always keeps its iterate")
    }

    pub fn final_exploitability(&self) -> Option<f64> {
        self.last().exploitability
    }

    pub fn exploitabilities(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.records.iter().filter_map(|r| r.exploitability.map(|e| (r.iteration, e)))
    }

    /// First iteration whose exploitability is at or below `threshold`.
    pub fn iterations_to(&self, threshold: f64) -> Option<usize> {
        self.exploitabilities().find(|&(_, e)| e <= threshold).map(|(k, _)| k)
    }
}

/// Accumulates records, thinning stored iterates when requested.
pub(crate) struct TraceBuilder {
    records: Vec<IterationRecord>,
    keep: bool,
}

impl TraceBuilder {
    pub(crate) fn new(keep: bool) -> Self {
        Self {
            records: Vec::new(),
            keep,
        }
    }

    pub(crate) fn push(&mut self, record: IterationRecord) {
        if !self.keep {
            if let Some(prev) = self.records.last_mut() {
                prev.flow = None;
                prev.policy = None;
            }
        }
        self.records.push(record);
    }

    pub(crate) fn finish(self, algorithm: &str, heuristic_dynamics: bool, termination: Termination) -> SolverTrace {
        SolverTrace {
            algorithm: algorithm.to_string(),
            records: self.records,
            heuristic_dynamics,
            termination,
        }
    }
}

pub(crate) fn due(k: usize, stride: usize, last: bool) -> bool {
    last || (stride > 0 && k.is_multiple_of(stride))
}

/// One FBS step: gradient move followed by projection.
struct FbsStepper {
    workspace: ProjectionWorkspace,
    alpha: f64,
    eta: f64,
}

impl FbsStepper {
    fn gradient_point(&self, d: &MeanFieldFlow, cost: &[f64]) -> Vec<f64> {
        d.as_slice()
            .iter()
            .zip(cost)
            .map(|(x, c)| x - self.alpha * (c + self.eta * x))
            .collect()
    }

    fn project(&mut self, iteration: usize, target: &[f64]) -> Result<(MeanFieldFlow, usize), SolverError> {
        let res = self
            .workspace
            .project(target)
            .map_err(|source| SolverError::Projection { iteration, source })?;
        Ok((res.point, res.inner_iterations))
    }

    fn rebuild(&mut self, iteration: usize, polytope: FlowPolytope) -> Result<(), SolverError> {
        self.workspace
            .rebuild(polytope)
            .map_err(|source| SolverError::Projection { iteration, source })
    }
}

/// Exact-model FBS. Mean-field dependent dynamics re-assemble the polytope
/// every iteration at the point selected by `options.anchor`.
pub fn solve_mfomi_fbs(
    model: &MfgModel,
    schedule: &SolverSchedule,
    initial_policy: &Policy,
    options: &SolverOptions,
) -> Result<SolverTrace, SolverError> {
    let start = Instant::now();
    let mut eval_time = 0.0;
    let dependent = model.is_mean_field_dependent();
    let mut d = mean_field_flow(initial_policy, model)?;
    let polytope = assemble_polytope_at(model, &d)?;
    let mut stepper = FbsStepper {
        workspace: ProjectionWorkspace::new(polytope, options.projection)
            .map_err(|source| SolverError::Projection { iteration: 0, source })?,
        alpha: schedule.alpha,
        eta: schedule.eta,
    };
    let mut trace = TraceBuilder::new(options.keep_iterates);
    let evaluate = |policy: &Policy, eval_time: &mut f64| -> Result<f64, SolverError> {
        let t0 = Instant::now();
        let e = exploitability(model, policy)?;
        *eval_time += t0.elapsed().as_secs_f64();
        Ok(e)
    };

    let mut policy = initial_policy.clone();
    let expl0 = if due(0, options.exploitability_stride, schedule.max_iterations == 0) || schedule.stop_exploitability.is_some() {
        Some(evaluate(&policy, &mut eval_time)?)
    } else {
        None
    };
    trace.push(IterationRecord {
        iteration: 0,
        flow: Some(d.clone()),
        policy: Some(policy.clone()),
        exploitability: expl0,
        elapsed_s: 0.0,
        projection_iterations: 0,
    });
    if let (Some(stop), Some(e)) = (schedule.stop_exploitability, expl0) {
        if e <= stop {
            return Ok(trace.finish("fbs", dependent, Termination::Converged));
        }
    }

    for k in 1..=schedule.max_iterations {
        let cost = cost_vector(model, &d);
        let target = stepper.gradient_point(&d, &cost);
        if dependent {
            let anchor = match options.anchor {
                AnchorRule::GradientPoint => MeanFieldFlow::from_vec(model.dims(), target.clone())?,
                AnchorRule::Iterate => d.clone(),
            };
            stepper.rebuild(k, assemble_polytope_at(model, &anchor)?)?;
        }
        let (next, inner) = stepper.project(k, &target)?;
        d = next;
        policy = normalize(&d, TieBreak::Uniform)?;
        let last = k == schedule.max_iterations;
        let expl = if due(k, options.exploitability_stride, last) || schedule.stop_exploitability.is_some() {
            Some(evaluate(&policy, &mut eval_time)?)
        } else {
            None
        };
        trace.push(IterationRecord {
            iteration: k,
            flow: Some(d.clone()),
            policy: Some(policy.clone()),
            exploitability: expl,
            elapsed_s: start.elapsed().as_secs_f64() - eval_time,
            projection_iterations: inner,
        });
        if let (Some(stop), Some(e)) = (schedule.stop_exploitability, expl) {
            if e <= stop {
                return Ok(trace.finish("fbs", dependent, Termination::Converged));
            }
        }
    }
    Ok(trace.finish("fbs", dependent, Termination::BudgetExhausted))
}

/// Approximate cost and kernel supplied to the approximate solver at one iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleEstimate {
    pub cost: Vec<f64>,
    pub transitions: TransitionTensor,
}

/// Source of `(c_hat^k, P_hat^k)` for the approximate solver.
pub trait ApproximationOracle {
    fn estimate(&mut self, iteration: usize, flow: &MeanFieldFlow) -> Result<OracleEstimate, SolverError>;
}

/// Oracle returning the exact cost and the kernel anchored at the iterate.
pub struct ExactOracle<'a> {
    pub model: &'a MfgModel,
}

impl ApproximationOracle for ExactOracle<'_> {
    fn estimate(&mut self, _iteration: usize, flow: &MeanFieldFlow) -> Result<OracleEstimate, SolverError> {
        Ok(OracleEstimate {
            cost: cost_vector(self.model, flow),
            transitions: self.model.transitions_at(flow)?,
        })
    }
}

/// Static problem data the approximate solver needs besides the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproxProblem {
    pub dims: Dims,
    pub mu0: Vec<f64>,
    pub r_max: f64,
}

pub(crate) fn check_estimate(problem: &ApproxProblem, iteration: usize, est: &OracleEstimate) -> Result<(), SolverError> {
    let reject = |reason: String| SolverError::InvalidOracle { iteration, reason };
    let n = problem.dims.flat_len();
    if est.cost.len() != n {
        return Err(reject(format!("cost has length {}, expected {n}", est.cost.len())));
    }
    if let Some((i, c)) = est.cost.iter().enumerate().find(|(_, c)| !(c.abs() <= problem.r_max + 1e-12)) {
        return Err(reject(format!("cost entry {i} = {c} exceeds r_max = {}", problem.r_max)));
    }
    if est.transitions.dims() != problem.dims {
        return Err(reject("transition estimate has the wrong shape".into()));
    }
    if let Some((t, s, a, sum)) = est.transitions.first_invalid_row(SOLVER_TOL) {
        return Err(reject(format!("transition row (t={t}, s={s}, a={a}) is not stochastic (sum {sum})")));
    }
    Ok(())
}

/// FBS with `c_hat^k` in place of `c(d^k)` and the polytope assembled from
/// `P_hat^k` each iteration. With an `evaluator`, exploitability is measured
/// on that (true) model.
pub fn solve_mfomi_fbs_approx(
    oracle: &mut dyn ApproximationOracle,
    problem: &ApproxProblem,
    schedule: &SolverSchedule,
    initial_flow: &MeanFieldFlow,
    options: &SolverOptions,
    evaluator: Option<&MfgModel>,
) -> Result<SolverTrace, SolverError> {
    if initial_flow.dims() != problem.dims {
        return Err(ModelError::DimsMismatch {
            left: problem.dims,
            right: initial_flow.dims(),
        }
        .into());
    }
    let start = Instant::now();
    // Oracle calls (e.g. sampling) and exploitability evaluation are not solver time.
    let mut excluded = 0.0;
    let mut d = initial_flow.clone();
    let mut trace = TraceBuilder::new(options.keep_iterates);
    let mut stepper: Option<FbsStepper> = None;
    let evaluate = |policy: &Policy, due_now: bool, excluded: &mut f64| -> Result<Option<f64>, SolverError> {
        match evaluator {
            Some(model) if due_now => {
                let t0 = Instant::now();
                let e = exploitability(model, policy)?;
                *excluded += t0.elapsed().as_secs_f64();
                Ok(Some(e))
            }
            _ => Ok(None),
        }
    };
    let mut policy = normalize(&d, TieBreak::Uniform)?;
    let e0 = evaluate(&policy, due(0, options.exploitability_stride, schedule.max_iterations == 0), &mut excluded)?;
    trace.push(IterationRecord {
        iteration: 0,
        flow: Some(d.clone()),
        policy: Some(policy.clone()),
        exploitability: e0,
        elapsed_s: 0.0,
        projection_iterations: 0,
    });
    for k in 1..=schedule.max_iterations {
        let oracle_start = Instant::now();
        let est = oracle.estimate(k, &d)?;
        excluded += oracle_start.elapsed().as_secs_f64();
        check_estimate(problem, k, &est)?;
        let polytope = FlowPolytope::from_transitions(problem.dims, &problem.mu0, &est.transitions)?;
        let stepper = match stepper.as_mut() {
            Some(s) => {
                s.rebuild(k, polytope)?;
                s
            }
            None => stepper.insert(FbsStepper {
                workspace: ProjectionWorkspace::new(polytope, options.projection)
                    .map_err(|source| SolverError::Projection { iteration: k, source })?,
                alpha: schedule.alpha,
                eta: schedule.eta,
            }),
        };
        let target = stepper.gradient_point(&d, &est.cost);
        let (next, inner) = stepper.project(k, &target)?;
        d = next;
        policy = normalize(&d, TieBreak::Uniform)?;
        let elapsed_s = (start.elapsed().as_secs_f64() - excluded).max(0.0);
        let expl = evaluate(&policy, due(k, options.exploitability_stride, k == schedule.max_iterations), &mut excluded)?;
        trace.push(IterationRecord {
            iteration: k,
            flow: Some(d.clone()),
            policy: Some(policy.clone()),
            exploitability: expl,
            elapsed_s,
            projection_iterations: inner,
        });
        if let (Some(stop), Some(e)) = (schedule.stop_exploitability, expl) {
            if e <= stop {
                return Ok(trace.finish("fbs-approx", false, Termination::Converged));
            }
        }
    }
    Ok(trace.finish("fbs-approx", false, Termination::BudgetExhausted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::forward_flow;
    use crate::evaluation::solve_induced_mdp;
    use crate::model::{uniform_policy, Transition};
    use crate::random::{congestion_model, decoupled_model};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn congestion_t1() -> MfgModel {
        let dims = Dims::new(2, 2, 1).unwrap();
        MfgModel::new(
            dims,
            vec![0.5, 0.5],
            Arc::new(move |_, s, a, l| -l[dims.block_index(s, a)]),
            Transition::Fixed(TransitionTensor::constant(dims, &[0.5, 0.5]).unwrap()),
            1.0,
        )
        .unwrap()
        .with_lipschitz(1.0)
        .with_monotonicity(1.0)
    }

    #[test]
    fn cost_vector_examples() {
        let dims = Dims::new(2, 2, 2).unwrap();
        let zero = MfgModel::new(
            dims,
            vec![0.5, 0.5],
            Arc::new(|_, _, _, _| 0.0),
            Transition::Fixed(TransitionTensor::constant(dims, &[0.5, 0.5]).unwrap()),
            1.0,
        )
        .unwrap();
        let l = MeanFieldFlow::from_vec(dims, vec![0.25; 8]).unwrap();
        assert!(cost_vector(&zero, &l).iter().all(|&c| c == 0.0));
        let neg = zero.with_reward(Arc::new(move |_, s, a, l: &[f64]| -l[dims.block_index(s, a)]));
        assert!(cost_vector(&neg, &l).iter().all(|&c| c == 0.25));
    }

    #[test]
    fn derive_schedule_examples() {
        let s = derive_schedule(1.0, 2, 2, 2, 0.5, None).unwrap();
        assert_eq!(s.alpha, 0.015625);
        assert_eq!(s.eta, 0.0);
        let s = derive_schedule(1.0, 2, 2, 2, 0.0, Some(0.1)).unwrap();
        assert!((s.eta - 0.0125).abs() < 1e-15);
        // 8 * C_R^2 * S^2 * A^2 * T = 256 for these constants.
        assert!((s.alpha - 0.1 / (256.0 + 0.0025)).abs() < 1e-15);
        assert_eq!(derive_schedule(1.0, 2, 2, 2, 0.0, None), Err(SolverError::MissingEpsilon));
        assert!(SolverSchedule::new(0.0, 0.0, 10).is_err());
        assert!(SolverSchedule::new(0.1, -1.0, 10).is_err());
    }

    #[test]
    fn decoupled_game_converges_to_mdp_optimum() {
        let dims = Dims::new(3, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = decoupled_model(dims, &mut rng);
        let schedule = SolverSchedule::new(1.0, 0.0, 200).unwrap().with_stop(1e-9);
        let trace = solve_mfomi_fbs(&model, &schedule, &uniform_policy(3, 2, 3).unwrap(), &SolverOptions::default()).unwrap();
        assert!(trace.final_exploitability().unwrap() <= 1e-6);
        let any = forward_flow(&uniform_policy(3, 2, 3).unwrap(), &model).unwrap();
        let opt = solve_induced_mdp(&model, &any).unwrap().optimal_policy;
        let target = forward_flow(&opt, &model).unwrap();
        assert!(trace.final_flow().l1_distance(&target) < 1e-5);
        assert_eq!(trace.termination, Termination::Converged);
    }

    #[test]
    fn congestion_reaches_uniform_flow() {
        let model = congestion_t1();
        let schedule = SolverSchedule::new(0.5, 0.0, 500).unwrap();
        let start = Policy::from_vec(model.dims(), vec![0.9, 0.2, 0.1, 0.8]).unwrap();
        let trace = solve_mfomi_fbs(&model, &schedule, &start, &SolverOptions::default()).unwrap();
        for v in trace.final_flow().as_slice() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn fixed_point_is_stationary() {
        let dims = Dims::new(3, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = congestion_model(dims, 1.0, &mut rng);
        let schedule = SolverSchedule::new(0.2, 0.0, 3000).unwrap().with_stop(1e-12);
        let trace = solve_mfomi_fbs(&model, &schedule, &uniform_policy(3, 2, 3).unwrap(), &SolverOptions::default()).unwrap();
        let d_star = trace.final_flow().clone();
        let once = SolverSchedule::new(0.2, 0.0, 1).unwrap();
        let restart = solve_mfomi_fbs(&model, &once, trace.final_policy(), &SolverOptions::default()).unwrap();
        assert!(restart.final_flow().l2_distance(&d_star) <= 1e-7);
    }

    #[test]
    fn exact_oracle_reproduces_exact_solver() {
        let dims = Dims::new(3, 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = congestion_model(dims, 0.8, &mut rng);
        let pi0 = uniform_policy(3, 2, 4).unwrap();
        let schedule = SolverSchedule::new(0.1, 0.0, 50).unwrap();
        let exact = solve_mfomi_fbs(&model, &schedule, &pi0, &SolverOptions::default()).unwrap();
        let problem = ApproxProblem {
            dims,
            mu0: model.mu0().to_vec(),
            r_max: model.r_max(),
        };
        let d0 = forward_flow(&pi0, &model).unwrap();
        let approx = solve_mfomi_fbs_approx(
            &mut ExactOracle { model: &model },
            &problem,
            &schedule,
            &d0,
            &SolverOptions::default(),
            Some(&model),
        )
        .unwrap();
        assert_eq!(exact.records.len(), approx.records.len());
        for (a, b) in exact.records.iter().zip(&approx.records) {
            assert!(a.flow.as_ref().unwrap().l2_distance(b.flow.as_ref().unwrap()) < 1e-6);
        }
    }

    struct BrokenKernel<'a>(&'a MfgModel);

    impl ApproximationOracle for BrokenKernel<'_> {
        fn estimate(&mut self, _: usize, flow: &MeanFieldFlow) -> Result<OracleEstimate, SolverError> {
            let mut p = self.0.transitions_at(flow)?;
            p.row_mut(0, 0, 0)[0] += 0.1;
            Ok(OracleEstimate {
                cost: cost_vector(self.0, flow),
                transitions: p,
            })
        }
    }

    #[test]
    fn non_stochastic_estimate_is_rejected() {
        let dims = Dims::new(2, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = congestion_model(dims, 0.5, &mut rng);
        let problem = ApproxProblem {
            dims,
            mu0: model.mu0().to_vec(),
            r_max: model.r_max(),
        };
        let d0 = forward_flow(&uniform_policy(2, 2, 2).unwrap(), &model).unwrap();
        let err = solve_mfomi_fbs_approx(
            &mut BrokenKernel(&model),
            &problem,
            &SolverSchedule::new(0.1, 0.0, 5).unwrap(),
            &d0,
            &SolverOptions::default(),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, SolverError::InvalidOracle { iteration: 1, .. }));
    }

    #[test]
    fn iterates_stay_feasible_and_records_are_contiguous() {
        let dims = Dims::new(3, 3, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = congestion_model(dims, 0.6, &mut rng);
        let poly = crate::dynamics::assemble_polytope(&model).unwrap();
        let trace = solve_mfomi_fbs(
            &model,
            &SolverSchedule::new(0.3, 0.0, 40).unwrap(),
            &uniform_policy(3, 3, 3).unwrap(),
            &SolverOptions::default(),
        )
        .unwrap();
        for (k, r) in trace.records.iter().enumerate() {
            assert_eq!(r.iteration, k);
            assert!(poly.equality_residual(r.flow.as_ref().unwrap().as_slice()) < 1e-7);
            r.policy.as_ref().unwrap().check_simplex(1e-9).unwrap();
        }
    }

    #[test]
    fn thinned_trace_keeps_only_the_last_iterate() {
        let model = congestion_t1();
        let options = SolverOptions {
            keep_iterates: false,
            exploitability_stride: 5,
            ..Default::default()
        };
        let trace = solve_mfomi_fbs(&model, &SolverSchedule::new(0.5, 0.0, 12).unwrap(), &uniform_policy(2, 2, 1).unwrap(), &options).unwrap();
        assert_eq!(trace.records.len(), 13);
        assert!(trace.records[..12].iter().all(|r| r.flow.is_none()));
        let evaluated: Vec<usize> = trace.exploitabilities().map(|(k, _)| k).collect();
        assert_eq!(evaluated, vec![0, 5, 10, 12]);
    }
}
