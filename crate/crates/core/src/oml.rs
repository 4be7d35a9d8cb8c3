//! Online mean-field occupation-measure learning: the splitting iteration
//! driven by sampled estimates, plus regret accounting.
//!
//! The learner sees the game only through exploration batches. Exploitability
//! of the executed policies is computed by a separate evaluation oracle on the
//! true model and can be switched off.

use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{normalize, TieBreak};
use crate::model::{Dims, MeanFieldFlow, MfgModel, ModelError};
use crate::nplayer::{
    assemble_estimates, estimate_rewards, sample_explore, EstimatedModel, ExplorationBatch, NPlayerError, NPlayerGame,
    TransitionCounts,
};
use crate::projection::ProjectionSettings;
use crate::solver::{
    solve_mfomi_fbs_approx, ApproxProblem, ApproximationOracle, ExactOracle, OracleEstimate, SolverError, SolverOptions,
    SolverSchedule, SolverTrace,
};

#[derive(Debug, Error)]
pub enum OmlError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    NPlayer(#[from] NPlayerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("regret report needs at least 10 episodes, got {0}")]
    TooShort(usize),
    #[error("cannot aggregate runs of different lengths ({0} vs {1} episodes)")]
    LengthMismatch(usize, usize),
}

/// Episodes collected in outer iteration `k` (counted from 1).
#[derive(Debug, Clone, PartialEq)]
pub enum EpisodeSchedule {
    Constant(usize),
    /// `n_k = k^3`.
    Cubic,
    /// `n_k` is entry `k - 1`.
    Custom(Vec<usize>),
}

impl EpisodeSchedule {
    pub fn episodes(&self, k: usize) -> usize {
        match self {
            Self::Constant(n) => *n,
            Self::Cubic => k.pow(3),
            Self::Custom(v) => v.get(k.wrapping_sub(1)).copied().unwrap_or(0),
        }
    }

    /// `sum_{j <= k} n_j`.
    pub fn cumulative(&self, k: usize) -> usize {
        (1..=k).map(|j| self.episodes(j)).sum()
    }
}

/// Which batches feed the transition estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransitionHistory {
    /// Only the current outer iteration.
    #[default]
    CurrentBatch,
    /// Every batch so far.
    Cumulative,
}

/// Source of the estimates handed to the splitting step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EstimatorMode {
    #[default]
    Sampled,
    /// Exact cost and kernel of the mean-field model; episodes are still
    /// counted for regret but not simulated.
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmlConfig {
    pub alpha: f64,
    pub eta: f64,
    pub schedule: EpisodeSchedule,
    pub outer_iterations: usize,
    pub transition_history: TransitionHistory,
    /// Default kernel row for unvisited `(t, s, a)`; uniform when `None`.
    pub p0: Option<Vec<f64>>,
    pub estimator: EstimatorMode,
    /// Compute exploitability of every executed policy on the true model.
    pub evaluate: bool,
    /// Keep the exploration batches in the result.
    pub keep_batches: bool,
    pub projection: ProjectionSettings,
}

impl Default for OmlConfig {
    fn default() -> Self {
        Self {
            alpha: 0.02,
            eta: 0.0,
            schedule: EpisodeSchedule::Constant(20),
            outer_iterations: 50,
            transition_history: TransitionHistory::default(),
            p0: None,
            estimator: EstimatorMode::default(),
            evaluate: true,
            keep_batches: false,
            projection: ProjectionSettings::default(),
        }
    }
}

impl OmlConfig {
    /// Regularization prescribed by the regret analysis when monotonicity is
    /// not strict: `max(N^{-1/6}, M^{-1/12})`.
    pub fn theory_eta(num_players: usize, total_episodes: usize) -> f64 {
        (num_players as f64).powf(-1.0 / 6.0).max((total_episodes as f64).powf(-1.0 / 12.0))
    }

    pub fn total_episodes(&self) -> usize {
        self.schedule.cumulative(self.outer_iterations)
    }

    pub fn validate(&self, dims: Dims) -> Result<(), OmlError> {
        let bad = |m: String| Err(OmlError::Config(m));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be nonnegative, got {}", self.eta));
        }
        if let Some(k) = (1..=self.outer_iterations).find(|&k| self.schedule.episodes(k) == 0) {
            return bad(format!("episode schedule gives n_k = 0 at k = {k}"));
        }
        if let Some(p0) = &self.p0 {
            let sum: f64 = p0.iter().sum();
            if p0.len() != dims.states || p0.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
                return bad("p0 must be a distribution over the states".into());
            }
        }
        Ok(())
    }
}

/// Estimator state. Consumes exploration batches and nothing else.
#[derive(Debug, Clone)]
pub struct Learner {
    dims: Dims,
    r_max: f64,
    p0: Vec<f64>,
    history: TransitionHistory,
    transitions: TransitionCounts,
    cumulative_visits: Vec<u64>,
    batches_seen: usize,
}

impl Learner {
    pub fn new(dims: Dims, r_max: f64, p0: Vec<f64>, history: TransitionHistory) -> Self {
        Self {
            dims,
            r_max,
            p0,
            history,
            transitions: TransitionCounts::new(dims),
            cumulative_visits: vec![0; dims.flat_len()],
            batches_seen: 0,
        }
    }

    pub fn batches_seen(&self) -> usize {
        self.batches_seen
    }

    /// Updates the counts with `batch` and returns the current estimates.
    pub fn observe(&mut self, batch: &ExplorationBatch) -> Result<EstimatedModel, OmlError> {
        if batch.episodes.is_empty() {
            return Err(OmlError::Config(format!("empty exploration batch at iteration {}", batch.iteration)));
        }
        let rewards = estimate_rewards(self.dims, batch)?;
        if self.history == TransitionHistory::CurrentBatch {
            self.transitions = TransitionCounts::new(self.dims);
        }
        self.transitions.add_batch(batch)?;
        for (c, n) in self.cumulative_visits.iter_mut().zip(&rewards.counts) {
            *c += n;
        }
        self.batches_seen += 1;
        let p_hat = self.transitions.estimate(&self.p0)?;
        Ok(assemble_estimates(&rewards, p_hat, self.cumulative_visits.clone(), self.r_max))
    }
}

struct SamplingOracle<'a> {
    game: &'a NPlayerGame,
    learner: Learner,
    schedule: &'a EpisodeSchedule,
    batches: Option<Vec<ExplorationBatch>>,
}

impl ApproximationOracle for SamplingOracle<'_> {
    fn estimate(&mut self, iteration: usize, flow: &MeanFieldFlow) -> Result<OracleEstimate, SolverError> {
        let fail = |e: &dyn std::fmt::Display| SolverError::InvalidOracle {
            iteration,
            reason: e.to_string(),
        };
        let policy = normalize(flow, TieBreak::Uniform)?;
        let batch = sample_explore(self.game, &policy, self.schedule.episodes(iteration), iteration).map_err(|e| fail(&e))?;
        let est = self.learner.observe(&batch).map_err(|e| fail(&e))?;
        if let Some(b) = self.batches.as_mut() {
            b.push(batch);
        }
        Ok(OracleEstimate {
            cost: est.c_hat,
            transitions: est.p_hat,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegretRecord {
    /// Global episode index, from 0.
    pub episode: usize,
    /// Outer iteration the episode was collected in, from 1.
    pub iteration: usize,
    /// Exploitability of the policy executed in this episode.
    pub exploitability: f64,
    /// Sum of `exploitability` over episodes `0..=episode`.
    pub expl_regret: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegretTrace {
    pub records: Vec<RegretRecord>,
}

impl RegretTrace {
    pub fn final_regret(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.expl_regret)
    }

    /// Cumulative regret after the first `m` episodes.
    pub fn regret_at(&self, m: usize) -> Option<f64> {
        match m {
            0 => Some(0.0),
            _ => self.records.get(m - 1).map(|r| r.expl_regret),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OmlRun {
    pub regret: Option<RegretTrace>,
    pub solver: SolverTrace,
    pub batches: Vec<ExplorationBatch>,
}

/// Initial occupation measure: `mu0` times the uniform policy at `t = 0`,
/// uniform afterwards. It needs no knowledge of the kernel and normalizes to
/// the uniform policy.
fn initial_flow(dims: Dims, mu0: &[f64]) -> MeanFieldFlow {
    let mut v = vec![1.0 / dims.state_actions() as f64; dims.flat_len()];
    for s in 0..dims.states {
        for a in 0..dims.actions {
            v[dims.index(0, s, a)] = mu0[s] / dims.actions as f64;
        }
    }
    MeanFieldFlow::from_vec(dims, v).expect("length matches dims")
}

/// Runs `K` outer iterations of online learning on `game`.
pub fn run_mf_oml(game: &NPlayerGame, config: &OmlConfig) -> Result<OmlRun, OmlError> {
    let dims = game.dims();
    config.validate(dims)?;
    let mu0 = game.empirical_mu0();
    let problem = ApproxProblem {
        dims,
        mu0: mu0.clone(),
        r_max: game.model().r_max(),
    };
    let schedule = SolverSchedule::new(config.alpha, config.eta, config.outer_iterations)?;
    let options = SolverOptions {
        projection: config.projection,
        exploitability_stride: 1,
        keep_iterates: true,
        ..SolverOptions::default()
    };
    let truth = game.mean_field_model();
    let evaluator = config.evaluate.then_some(&truth);
    let start = initial_flow(dims, &mu0);
    let (solver, batches) = match config.estimator {
        EstimatorMode::Sampled => {
            let p0 = config.p0.clone().unwrap_or_else(|| vec![1.0 / dims.states as f64; dims.states]);
            let mut oracle = SamplingOracle {
                game,
                learner: Learner::new(dims, problem.r_max, p0, config.transition_history),
                schedule: &config.schedule,
                batches: config.keep_batches.then(Vec::new),
            };
            let trace = solve_mfomi_fbs_approx(&mut oracle, &problem, &schedule, &start, &options, evaluator)?;
            (trace, oracle.batches.unwrap_or_default())
        }
        EstimatorMode::Exact => {
            let mut oracle = ExactOracle { model: &truth };
            let trace = solve_mfomi_fbs_approx(&mut oracle, &problem, &schedule, &start, &options, evaluator)?;
            (trace, Vec::new())
        }
    };
    let regret = config.evaluate.then(|| regret_trace(&solver, &config.schedule));
    Ok(OmlRun { regret, solver, batches })
}

/// Attributes the exploitability of the policy executed in iteration `k`
/// (the normalized iterate `d^{k-1}`) to each of its `n_k` episodes.
fn regret_trace(solver: &SolverTrace, schedule: &EpisodeSchedule) -> RegretTrace {
    let mut records = Vec::new();
    let mut regret = 0.0;
    for k in 1..solver.records.len() {
        let expl = solver.records[k - 1].exploitability.unwrap_or(f64::NAN);
        for _ in 0..schedule.episodes(k) {
            regret += expl;
            records.push(RegretRecord {
                episode: records.len(),
                iteration: k,
                exploitability: expl,
                expl_regret: regret,
            });
        }
    }
    RegretTrace { records }
}

/// Independent runs for each seed, in parallel. The seed drives both the
/// initial profile and every episode stream.
pub fn run_seeds(
    model: &MfgModel,
    num_players: usize,
    reward_noise: f64,
    config: &OmlConfig,
    seeds: &[u64],
) -> Vec<Result<OmlRun, OmlError>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let game = NPlayerGame::new(model.clone(), num_players, seed)?.with_reward_noise(reward_noise)?;
            run_mf_oml(&game, config)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegretReport {
    /// Mean exploitability over consecutive windows of episodes.
    pub window_means: Vec<f64>,
    /// Least-squares slope of `log ExplRegret(M)` against `log M` over the
    /// trailing half of the episodes.
    pub growth_exponent: f64,
    pub final_regret: f64,
}

pub fn regret_report(trace: &RegretTrace, window: usize) -> Result<RegretReport, OmlError> {
    let m = trace.records.len();
    if m < 10 {
        return Err(OmlError::TooShort(m));
    }
    if window == 0 {
        return Err(OmlError::Config("window must be positive".into()));
    }
    let window_means = trace
        .records
        .chunks(window)
        .map(|c| c.iter().map(|r| r.exploitability).sum::<f64>() / c.len() as f64)
        .collect();
    Ok(RegretReport {
        window_means,
        growth_exponent: growth_exponent(trace),
        final_regret: trace.final_regret(),
    })
}

fn growth_exponent(trace: &RegretTrace) -> f64 {
    let m = trace.records.len();
    let pts: Vec<(f64, f64)> = trace.records[m / 2..]
        .iter()
        .filter(|r| r.expl_regret > 0.0)
        .map(|r| (((r.episode + 1) as f64).ln(), r.expl_regret.ln()))
        .collect();
    if pts.len() < 2 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Per-episode mean across seeds with 95% normal-approximation half-widths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateRecord {
    pub episode: usize,
    pub iteration: usize,
    pub expl_mean: f64,
    pub expl_half_width: f64,
    pub regret_mean: f64,
    pub regret_half_width: f64,
}

pub fn aggregate(traces: &[RegretTrace]) -> Result<Vec<AggregateRecord>, OmlError> {
    let Some(first) = traces.first() else {
        return Ok(Vec::new());
    };
    let m = first.records.len();
    if let Some(t) = traces.iter().find(|t| t.records.len() != m) {
        return Err(OmlError::LengthMismatch(m, t.records.len()));
    }
    let n = traces.len() as f64;
    let stats = |xs: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = xs.collect();
        let mean = v.iter().sum::<f64>() / n;
        if v.len() < 2 {
            return (mean, 0.0);
        }
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, 1.96 * (var / n).sqrt())
    };
    Ok((0..m)
        .map(|i| {
            let (expl_mean, expl_half_width) = stats(&mut traces.iter().map(|t| t.records[i].exploitability));
            let (regret_mean, regret_half_width) = stats(&mut traces.iter().map(|t| t.records[i].expl_regret));
            AggregateRecord {
                episode: i,
                iteration: first.records[i].iteration,
                expl_mean,
                expl_half_width,
                regret_mean,
                regret_half_width,
            }
        })
        .collect())
}
