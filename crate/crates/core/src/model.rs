//! Core domain types: game models, mean-field flows and policies.
//!
//! Every time-indexed state-action tensor in this crate uses the same flat
//! layout: the `(s, a)` block of step `t` is stored column-major (state index
//! varies fastest) and the `T` blocks are concatenated in time order, so the
//! entry for `(t, s, a)` lives at `t * S * A + a * S + s`.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Simplex tolerance for exactly constructed distributions.
pub const EXACT_TOL: f64 = 1e-12;
/// Simplex tolerance for flows produced by iterative solvers.
pub const SOLVER_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension `{0}` must be positive")]
    ZeroDimension(&'static str),
    #[error("{what}: expected length {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("dimensions differ: {left:?} vs {right:?}")]
    DimsMismatch { left: Dims, right: Dims },
    #[error("{what} has a negative entry {value} at index {index}")]
    NegativeEntry {
        what: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{what} is not a distribution at {location}: sums to {sum}")]
    NotNormalized {
        what: &'static str,
        location: String,
        sum: f64,
    },
    #[error("operation requires mean-field independent transitions")]
    MeanFieldDependentTransitions,
    #[error("reward bound r_max must be positive and finite, got {0}")]
    InvalidRewardBound(f64),
    #[error("agent index {index} out of range for {players} players")]
    AgentOutOfRange { index: usize, players: usize },
}

/// Sizes of a finite-horizon tabular game.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
}

impl Dims {
    pub fn new(states: usize, actions: usize, horizon: usize) -> Result<Self, ModelError> {
        if states == 0 {
            return Err(ModelError::ZeroDimension("states"));
        }
        if actions == 0 {
            return Err(ModelError::ZeroDimension("actions"));
        }
        if horizon == 0 {
            return Err(ModelError::ZeroDimension("horizon"));
        }
        Ok(Self {
            states,
            actions,
            horizon,
        })
    }

    /// `S * A`, the length of one time block.
    #[inline]
    pub fn state_actions(&self) -> usize {
        self.states * self.actions
    }

    /// `S * A * T`, the length of a flattened flow.
    #[inline]
    pub fn flat_len(&self) -> usize {
        self.state_actions() * self.horizon
    }

    #[inline]
    pub fn index(&self, t: usize, s: usize, a: usize) -> usize {
        t * self.state_actions() + a * self.states + s
    }

    #[inline]
    pub fn block_index(&self, s: usize, a: usize) -> usize {
        a * self.states + s
    }

    /// Number of equality constraints of the flow polytope, `S * T`.
    #[inline]
    pub fn constraint_rows(&self) -> usize {
        self.states * self.horizon
    }

    /// Number of transition steps, `T - 1`.
    #[inline]
    pub fn transition_steps(&self) -> usize {
        self.horizon - 1
    }
}

/// `(t, s, a, L_t) -> R_t(s, a, L_t)`; `L_t` is the `S * A` block of step `t`.
pub type RewardFn = dyn Fn(usize, usize, usize, &[f64]) -> f64 + Send + Sync;

/// `(t, s, a, L_t, out)` writes `P_t(. | s, a, L_t)` into `out` (length `S`).
pub type TransitionFn = dyn Fn(usize, usize, usize, &[f64], &mut [f64]) + Send + Sync;

/// Fixed transition kernel for steps `0..T-1`, indexed `[t][s][a][s']`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTensor {
    dims: Dims,
    values: Vec<f64>,
}

impl TransitionTensor {
    pub fn new(dims: Dims, values: Vec<f64>) -> Result<Self, ModelError> {
        let expected = dims.transition_steps() * dims.state_actions() * dims.states;
        if values.len() != expected {
            return Err(ModelError::ShapeMismatch {
                what: "transition tensor",
                expected,
                got: values.len(),
            });
        }
        Ok(Self { dims, values })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, &mut [f64])) -> Self {
        let s_count = dims.states;
        let mut values = vec![0.0; dims.transition_steps() * dims.state_actions() * s_count];
        for t in 0..dims.transition_steps() {
            for s in 0..s_count {
                for a in 0..dims.actions {
                    let off = Self::offset(&dims, t, s, a);
                    f(t, s, a, &mut values[off..off + s_count]);
                }
            }
        }
        Self { dims, values }
    }

    /// Every row equal to `row`.
    pub fn constant(dims: Dims, row: &[f64]) -> Result<Self, ModelError> {
        if row.len() != dims.states {
            return Err(ModelError::ShapeMismatch {
                what: "transition row",
                expected: dims.states,
                got: row.len(),
            });
        }
        Ok(Self::from_fn(dims, |_, _, _, out| out.copy_from_slice(row)))
    }

    #[inline]
    fn offset(dims: &Dims, t: usize, s: usize, a: usize) -> usize {
        ((t * dims.states + s) * dims.actions + a) * dims.states
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn row(&self, t: usize, s: usize, a: usize) -> &[f64] {
        let off = Self::offset(&self.dims, t, s, a);
        &self.values[off..off + self.dims.states]
    }

    #[inline]
    pub fn row_mut(&mut self, t: usize, s: usize, a: usize) -> &mut [f64] {
        let off = Self::offset(&self.dims, t, s, a);
        let n = self.dims.states;
        &mut self.values[off..off + n]
    }

    /// First row whose entries are negative or do not sum to one within `tol`.
    pub fn first_invalid_row(&self, tol: f64) -> Option<(usize, usize, usize, f64)> {
        for t in 0..self.dims.transition_steps() {
            for s in 0..self.dims.states {
                for a in 0..self.dims.actions {
                    let row = self.row(t, s, a);
                    let sum: f64 = row.iter().sum();
                    if row.iter().any(|&p| p < 0.0 || !p.is_finite()) || (sum - 1.0).abs() > tol {
                        return Some((t, s, a, sum));
                    }
                }
            }
        }
        None
    }

    /// `max_{t,s,a} sum_{s'} |P(s'|s,a) - Q(s'|s,a)|`.
    pub fn max_row_l1_distance(&self, other: &TransitionTensor) -> f64 {
        self.values
            .chunks(self.dims.states)
            .zip(other.values.chunks(other.dims.states))
            .map(|(p, q)| p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone)]
pub enum Transition {
    Fixed(TransitionTensor),
    MeanFieldDependent(Arc<TransitionFn>),
}

impl fmt::Debug for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transition::Fixed(p) => f.debug_tuple("Fixed").field(&p.dims).finish(),
            Transition::MeanFieldDependent(_) => f.write_str("MeanFieldDependent(..)"),
        }
    }
}

/// A finite-horizon tabular mean-field game.
#[derive(Clone)]
pub struct MfgModel {
    dims: Dims,
    mu0: Vec<f64>,
    reward: Arc<RewardFn>,
    transition: Transition,
    r_max: f64,
    lipschitz_c_r: Option<f64>,
    monotone_lambda: Option<f64>,
}

impl fmt::Debug for MfgModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MfgModel")
            .field("dims", &self.dims)
            .field("mu0", &self.mu0)
            .field("transition", &self.transition)
            .field("r_max", &self.r_max)
            .field("lipschitz_c_r", &self.lipschitz_c_r)
            .field("monotone_lambda", &self.monotone_lambda)
            .finish_non_exhaustive()
    }
}

impl MfgModel {
    /// Checks shapes only; use [`validate_model`] for the simplex invariants.
    pub fn new(
        dims: Dims,
        mu0: Vec<f64>,
        reward: Arc<RewardFn>,
        transition: Transition,
        r_max: f64,
    ) -> Result<Self, ModelError> {
        if mu0.len() != dims.states {
            return Err(ModelError::ShapeMismatch {
                what: "mu0",
                expected: dims.states,
                got: mu0.len(),
            });
        }
        if let Transition::Fixed(p) = &transition {
            if p.dims != dims {
                return Err(ModelError::DimsMismatch {
                    left: dims,
                    right: p.dims,
                });
            }
        }
        if !(r_max > 0.0 && r_max.is_finite()) {
            return Err(ModelError::InvalidRewardBound(r_max));
        }
        Ok(Self {
            dims,
            mu0,
            reward,
            transition,
            r_max,
            lipschitz_c_r: None,
            monotone_lambda: None,
        })
    }

    pub fn with_lipschitz(mut self, c_r: f64) -> Self {
        self.lipschitz_c_r = Some(c_r);
        self
    }

    pub fn with_monotonicity(mut self, lambda: f64) -> Self {
        self.monotone_lambda = Some(lambda);
        self
    }

    pub fn with_mu0(mut self, mu0: Vec<f64>) -> Result<Self, ModelError> {
        if mu0.len() != self.dims.states {
            return Err(ModelError::ShapeMismatch {
                what: "mu0",
                expected: self.dims.states,
                got: mu0.len(),
            });
        }
        self.mu0 = mu0;
        Ok(self)
    }

    pub fn with_transition(mut self, transition: Transition) -> Result<Self, ModelError> {
        if let Transition::Fixed(p) = &transition {
            if p.dims != self.dims {
                return Err(ModelError::DimsMismatch {
                    left: self.dims,
                    right: p.dims,
                });
            }
        }
        self.transition = transition;
        Ok(self)
    }

    pub fn with_reward(mut self, reward: Arc<RewardFn>) -> Self {
        self.reward = reward;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn mu0(&self) -> &[f64] {
        &self.mu0
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn lipschitz_c_r(&self) -> Option<f64> {
        self.lipschitz_c_r
    }

    pub fn monotone_lambda(&self) -> Option<f64> {
        self.monotone_lambda
    }

    pub fn transition(&self) -> &Transition {
        &self.transition
    }

    pub fn reward_fn(&self) -> &Arc<RewardFn> {
        &self.reward
    }

    pub fn is_mean_field_dependent(&self) -> bool {
        matches!(self.transition, Transition::MeanFieldDependent(_))
    }

    pub fn fixed_transitions(&self) -> Option<&TransitionTensor> {
        match &self.transition {
            Transition::Fixed(p) => Some(p),
            Transition::MeanFieldDependent(_) => None,
        }
    }

    #[inline]
    pub fn reward(&self, t: usize, s: usize, a: usize, l_t: &[f64]) -> f64 {
        (self.reward)(t, s, a, l_t)
    }

    /// Writes `P_t(. | s, a, L_t)` into `out`; `l_t` is ignored for fixed kernels.
    pub fn transition_row_into(&self, t: usize, s: usize, a: usize, l_t: &[f64], out: &mut [f64]) {
        match &self.transition {
            Transition::Fixed(p) => out.copy_from_slice(p.row(t, s, a)),
            Transition::MeanFieldDependent(f) => f(t, s, a, l_t, out),
        }
    }

    /// Transition kernel with every step anchored at the corresponding block of `anchor`.
    pub fn transitions_at(&self, anchor: &MeanFieldFlow) -> Result<TransitionTensor, ModelError> {
        if anchor.dims() != self.dims {
            return Err(ModelError::DimsMismatch {
                left: self.dims,
                right: anchor.dims(),
            });
        }
        Ok(match &self.transition {
            Transition::Fixed(p) => p.clone(),
            Transition::MeanFieldDependent(f) => {
                TransitionTensor::from_fn(self.dims, |t, s, a, out| f(t, s, a, anchor.at(t), out))
            }
        })
    }

    /// `R_t(s, a, L_t)` for every `(t, s, a)`, in flat layout.
    pub fn reward_table(&self, flow: &MeanFieldFlow) -> Vec<f64> {
        let d = self.dims;
        let mut out = vec![0.0; d.flat_len()];
        for t in 0..d.horizon {
            let l_t = flow.at(t);
            for a in 0..d.actions {
                for s in 0..d.states {
                    out[d.index(t, s, a)] = self.reward(t, s, a, l_t);
                }
            }
        }
        out
    }
}

/// Time-indexed state-action distribution. Serves both as a mean-field flow
/// `L` and as an occupation measure `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldFlow {
    dims: Dims,
    values: Vec<f64>,
}

impl MeanFieldFlow {
    /// Wraps a flat vector; only the length is checked.
    pub fn from_vec(dims: Dims, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != dims.flat_len() {
            return Err(ModelError::ShapeMismatch {
                what: "flow",
                expected: dims.flat_len(),
                got: values.len(),
            });
        }
        Ok(Self { dims, values })
    }

    /// From a nested `T x S x A` tensor.
    pub fn from_tensor(tensor: &[Vec<Vec<f64>>]) -> Result<Self, ModelError> {
        let horizon = tensor.len();
        let states = tensor.first().map_or(0, |b| b.len());
        let actions = tensor.first().and_then(|b| b.first()).map_or(0, |r| r.len());
        let dims = Dims::new(states, actions, horizon)?;
        let mut values = vec![0.0; dims.flat_len()];
        for (t, block) in tensor.iter().enumerate() {
            if block.len() != states {
                return Err(ModelError::ShapeMismatch {
                    what: "flow tensor states",
                    expected: states,
                    got: block.len(),
                });
            }
            for (s, row) in block.iter().enumerate() {
                if row.len() != actions {
                    return Err(ModelError::ShapeMismatch {
                        what: "flow tensor actions",
                        expected: actions,
                        got: row.len(),
                    });
                }
                for (a, &v) in row.iter().enumerate() {
                    values[dims.index(t, s, a)] = v;
                }
            }
        }
        Ok(Self { dims, values })
    }

    pub fn to_tensor(&self) -> Vec<Vec<Vec<f64>>> {
        let d = self.dims;
        (0..d.horizon)
            .map(|t| {
                (0..d.states)
                    .map(|s| (0..d.actions).map(|a| self.get(t, s, a)).collect())
                    .collect()
            })
            .collect()
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            values: vec![0.0; dims.flat_len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    /// The `S * A` block of step `t`.
    #[inline]
    pub fn at(&self, t: usize) -> &[f64] {
        let n = self.dims.state_actions();
        &self.values[t * n..(t + 1) * n]
    }

    #[inline]
    pub fn get(&self, t: usize, s: usize, a: usize) -> f64 {
        self.values[self.dims.index(t, s, a)]
    }

    /// `mu_t(s) = sum_a L_t(s, a)`.
    pub fn state_marginal(&self, t: usize) -> Vec<f64> {
        let d = self.dims;
        (0..d.states)
            .map(|s| (0..d.actions).map(|a| self.get(t, s, a)).sum())
            .collect()
    }

    pub fn l1_distance(&self, other: &MeanFieldFlow) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| (x - y).abs())
            .sum()
    }

    pub fn l2_distance(&self, other: &MeanFieldFlow) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    /// Checks nonnegativity and per-step normalization within `tol`.
    pub fn check_distribution(&self, tol: f64) -> Result<(), ModelError> {
        if let Some((i, &v)) = self.values.iter().enumerate().find(|(_, &v)| v < 0.0) {
            return Err(ModelError::NegativeEntry {
                what: "flow",
                index: i,
                value: v,
            });
        }
        for t in 0..self.dims.horizon {
            let sum: f64 = self.at(t).iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(ModelError::NotNormalized {
                    what: "flow",
                    location: format!("t={t}"),
                    sum,
                });
            }
        }
        Ok(())
    }
}

/// Time-indexed per-state action distributions, in the shared flat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    dims: Dims,
    values: Vec<f64>,
}

impl Policy {
    pub fn from_vec(dims: Dims, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != dims.flat_len() {
            return Err(ModelError::ShapeMismatch {
                what: "policy",
                expected: dims.flat_len(),
                got: values.len(),
            });
        }
        Ok(Self { dims, values })
    }

    /// Builds a policy from `f(t, s, a)`; the caller is responsible for normalization.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut values = vec![0.0; dims.flat_len()];
        for t in 0..dims.horizon {
            for a in 0..dims.actions {
                for s in 0..dims.states {
                    values[dims.index(t, s, a)] = f(t, s, a);
                }
            }
        }
        Self { dims, values }
    }

    /// Deterministic policy playing `choice(t, s)`.
    pub fn deterministic(dims: Dims, mut choice: impl FnMut(usize, usize) -> usize) -> Self {
        let mut p = Self {
            dims,
            values: vec![0.0; dims.flat_len()],
        };
        for t in 0..dims.horizon {
            for s in 0..dims.states {
                let a = choice(t, s);
                p.values[dims.index(t, s, a)] = 1.0;
            }
        }
        p
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn prob(&self, t: usize, s: usize, a: usize) -> f64 {
        self.values[self.dims.index(t, s, a)]
    }

    pub fn set(&mut self, t: usize, s: usize, a: usize, p: f64) {
        let i = self.dims.index(t, s, a);
        self.values[i] = p;
    }

    /// The action distribution at `(t, s)`.
    pub fn distribution(&self, t: usize, s: usize) -> Vec<f64> {
        (0..self.dims.actions).map(|a| self.prob(t, s, a)).collect()
    }

    pub fn check_simplex(&self, tol: f64) -> Result<(), ModelError> {
        if let Some((i, &v)) = self.values.iter().enumerate().find(|(_, &v)| v < 0.0) {
            return Err(ModelError::NegativeEntry {
                what: "policy",
                index: i,
                value: v,
            });
        }
        for t in 0..self.dims.horizon {
            for s in 0..self.dims.states {
                let sum: f64 = (0..self.dims.actions).map(|a| self.prob(t, s, a)).sum();
                if (sum - 1.0).abs() > tol {
                    return Err(ModelError::NotNormalized {
                        what: "policy",
                        location: format!("t={t}, s={s}"),
                        sum,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Every entry equal to `1 / A`.
pub fn uniform_policy(states: usize, actions: usize, horizon: usize) -> Result<Policy, ModelError> {
    let dims = Dims::new(states, actions, horizon)?;
    Ok(Policy {
        dims,
        values: vec![1.0 / actions as f64; dims.flat_len()],
    })
}

/// Profile where every agent plays `base_policy`, except possibly one deviator.
#[derive(Debug, Clone)]
pub struct StrategyProfileSummary {
    pub base_policy: Policy,
    pub deviating_agent: Option<usize>,
    pub deviation_policy: Option<Policy>,
}

impl StrategyProfileSummary {
    pub fn symmetric(base_policy: Policy) -> Self {
        Self {
            base_policy,
            deviating_agent: None,
            deviation_policy: None,
        }
    }

    pub fn with_deviation(
        base_policy: Policy,
        agent: usize,
        deviation: Policy,
        num_players: usize,
    ) -> Result<Self, ModelError> {
        if agent >= num_players {
            return Err(ModelError::AgentOutOfRange {
                index: agent,
                players: num_players,
            });
        }
        if deviation.dims() != base_policy.dims() {
            return Err(ModelError::DimsMismatch {
                left: base_policy.dims(),
                right: deviation.dims(),
            });
        }
        Ok(Self {
            base_policy,
            deviating_agent: Some(agent),
            deviation_policy: Some(deviation),
        })
    }

    pub fn policy_of(&self, agent: usize) -> &Policy {
        match (self.deviating_agent, &self.deviation_policy) {
            (Some(i), Some(p)) if i == agent => p,
            _ => &self.base_policy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationIssue {
    Mu0Negative { state: usize, value: f64 },
    Mu0NotNormalized { sum: f64 },
    TransitionNegative { t: usize, s: usize, a: usize, next: usize, value: f64 },
    TransitionNotNormalized { t: usize, s: usize, a: usize, sum: f64 },
    RewardOutOfBound { t: usize, s: usize, a: usize, value: f64, r_max: f64 },
    NonFinite { what: &'static str, t: usize, s: usize, a: usize },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationIssue::Mu0Negative { state, value } => {
                write!(f, "mu0[{state}] = {value} is negative")
            }
            ValidationIssue::Mu0NotNormalized { sum } => {
                write!(f, "mu0 normalization: entries sum to {sum}")
            }
            ValidationIssue::TransitionNegative { t, s, a, next, value } => {
                write!(f, "transition (t={t}, s={s}, a={a}) has negative entry {value} at s'={next}")
            }
            ValidationIssue::TransitionNotNormalized { t, s, a, sum } => {
                write!(f, "transition row (t={t}, s={s}, a={a}) sums to {sum}")
            }
            ValidationIssue::RewardOutOfBound { t, s, a, value, r_max } => {
                write!(f, "reward (t={t}, s={s}, a={a}) = {value} exceeds r_max = {r_max}")
            }
            ValidationIssue::NonFinite { what, t, s, a } => {
                write!(f, "{what} at (t={t}, s={s}, a={a}) is not finite")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.issues.is_empty() {
            return f.write_str("model is valid");
        }
        for issue in &self.issues {
            writeln!(f, "{issue}")?;
        }
        Ok(())
    }
}

/// Probe blocks used to exercise reward and transition callables: the
/// uniform distribution and, for small blocks, every point mass.
fn probe_blocks(dims: Dims) -> Vec<Vec<f64>> {
    let n = dims.state_actions();
    let mut blocks = vec![vec![1.0 / n as f64; n]];
    if n <= 64 {
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            blocks.push(e);
        }
    }
    blocks
}

fn check_row(
    report: &mut ValidationReport,
    row: &[f64],
    t: usize,
    s: usize,
    a: usize,
) {
    if row.iter().any(|p| !p.is_finite()) {
        report.issues.push(ValidationIssue::NonFinite {
            what: "transition",
            t,
            s,
            a,
        });
        return;
    }
    if let Some((next, &value)) = row.iter().enumerate().find(|(_, &p)| p < 0.0) {
        report.issues.push(ValidationIssue::TransitionNegative {
            t,
            s,
            a,
            next,
            value,
        });
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > EXACT_TOL {
        report
            .issues
            .push(ValidationIssue::TransitionNotNormalized { t, s, a, sum });
    }
}

/// Lists every violated model invariant. Rewards and mean-field dependent
/// transitions are exercised on the probe blocks of [`probe_blocks`].
pub fn validate_model(model: &MfgModel) -> ValidationReport {
    let mut report = ValidationReport::default();
    let d = model.dims();
    for (state, &value) in model.mu0().iter().enumerate() {
        if value < 0.0 || !value.is_finite() {
            report.issues.push(ValidationIssue::Mu0Negative { state, value });
        }
    }
    let sum: f64 = model.mu0().iter().sum();
    if (sum - 1.0).abs() > EXACT_TOL {
        report.issues.push(ValidationIssue::Mu0NotNormalized { sum });
    }

    let probes = probe_blocks(d);
    let mut row = vec![0.0; d.states];
    match model.transition() {
        Transition::Fixed(p) => {
            for t in 0..d.transition_steps() {
                for s in 0..d.states {
                    for a in 0..d.actions {
                        check_row(&mut report, p.row(t, s, a), t, s, a);
                    }
                }
            }
        }
        Transition::MeanFieldDependent(f) => {
            for t in 0..d.transition_steps() {
                for s in 0..d.states {
                    for a in 0..d.actions {
                        let before = report.issues.len();
                        for block in &probes {
                            f(t, s, a, block, &mut row);
                            check_row(&mut report, &row, t, s, a);
                            if report.issues.len() > before {
                                break;
                            }
                        }
                    }
                }
            }
        }
    }

    let r_max = model.r_max();
    for t in 0..d.horizon {
        for s in 0..d.states {
            for a in 0..d.actions {
                for block in &probes {
                    let value = model.reward(t, s, a, block);
                    if !value.is_finite() {
                        report.issues.push(ValidationIssue::NonFinite {
                            what: "reward",
                            t,
                            s,
                            a,
                        });
                        break;
                    }
                    if value.abs() > r_max * (1.0 + EXACT_TOL) {
                        report.issues.push(ValidationIssue::RewardOutOfBound {
                            t,
                            s,
                            a,
                            value,
                            r_max,
                        });
                        break;
                    }
                }
            }
        }
    }
    report
}
