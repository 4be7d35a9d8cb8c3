//! Symmetric N-player episodic simulator, exploration sampling and the sample
//! estimators of rewards and transitions.
//!
//! Every episode draws from its own ChaCha8 stream derived from the game seed
//! and `(k, l)` (outer iteration, episode index), so batches are identical
//! whether episodes run serially or on the rayon pool.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{forward_flow, mean_field_flow, reachability};
use crate::model::{uniform_policy, Dims, MfgModel, ModelError, Policy, TransitionTensor};

#[derive(Debug, Error)]
pub enum NPlayerError {
    #[error("expected {expected} policies, got {got}")]
    PolicyCount { expected: usize, got: usize },
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
    #[error("batch record is inconsistent with the game: {0}")]
    InvalidBatch(String),
    #[error("joint state space too large for the exact oracle ({0} joint transitions per step)")]
    TooLarge(u128),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed batch record on line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Stream reserved for drawing the initial profile.
const PROFILE_STREAM: u64 = u64::MAX;

/// A symmetric N-player game built on a mean-field model: the same reward and
/// kernel, evaluated at the empirical state-action distribution `L_t^N`.
#[derive(Debug, Clone)]
pub struct NPlayerGame {
    model: MfgModel,
    num_players: usize,
    initial_profile: Vec<usize>,
    reward_noise: f64,
    seed: u64,
}

impl NPlayerGame {
    /// Initial states are drawn i.i.d. from the model's `mu0`.
    pub fn new(model: MfgModel, num_players: usize, seed: u64) -> Result<Self, NPlayerError> {
        if num_players == 0 {
            return Err(NPlayerError::InvalidParameter {
                field: "num_players",
                reason: "must be positive".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(PROFILE_STREAM);
        let mu0 = model.mu0().to_vec();
        let profile = (0..num_players).map(|_| sample_index(&mu0, rng.random())).collect();
        Self::with_profile(model, profile, seed)
    }

    pub fn with_profile(model: MfgModel, initial_profile: Vec<usize>, seed: u64) -> Result<Self, NPlayerError> {
        if initial_profile.is_empty() {
            return Err(NPlayerError::InvalidParameter {
                field: "initial_profile",
                reason: "needs at least one player".into(),
            });
        }
        let s = model.dims().states;
        if let Some(bad) = initial_profile.iter().find(|&&x| x >= s) {
            return Err(NPlayerError::InvalidParameter {
                field: "initial_profile",
                reason: format!("state {bad} out of range for {s} states"),
            });
        }
        Ok(Self {
            model,
            num_players: initial_profile.len(),
            initial_profile,
            reward_noise: 0.0,
            seed,
        })
    }

    /// Sampled rewards get additive noise uniform on `[-amplitude, amplitude]`.
    pub fn with_reward_noise(mut self, amplitude: f64) -> Result<Self, NPlayerError> {
        if !(amplitude >= 0.0 && amplitude.is_finite()) {
            return Err(NPlayerError::InvalidParameter {
                field: "reward_noise",
                reason: format!("{amplitude} must be finite and nonnegative"),
            });
        }
        self.reward_noise = amplitude;
        Ok(self)
    }

    pub fn model(&self) -> &MfgModel {
        &self.model
    }

    pub fn dims(&self) -> Dims {
        self.model.dims()
    }

    pub fn num_players(&self) -> usize {
        self.num_players
    }

    pub fn initial_profile(&self) -> &[usize] {
        &self.initial_profile
    }

    pub fn reward_noise(&self) -> f64 {
        self.reward_noise
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `mu0^N`, the empirical distribution of the initial profile.
    pub fn empirical_mu0(&self) -> Vec<f64> {
        let mut mu = vec![0.0; self.dims().states];
        let w = 1.0 / self.num_players as f64;
        for &s in &self.initial_profile {
            mu[s] += w;
        }
        mu
    }

    /// The mean-field game approximating this game (initial law `mu0^N`).
    pub fn mean_field_model(&self) -> MfgModel {
        self.model
            .clone()
            .with_mu0(self.empirical_mu0())
            .expect("profile length matches the state count")
    }

    /// Stream of episode `l` in outer iteration `k`.
    pub fn episode_rng(&self, k: usize, l: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((k as u64) << 32) | (l as u64 & 0xffff_ffff));
        rng
    }
}

/// One step of one agent. `next_state` is `None` at the last step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    /// One trajectory of `T` steps per agent.
    pub trajectories: Vec<Vec<Step>>,
    /// `L_t^N` for every step, in flow layout.
    pub empirical_flow: Vec<f64>,
}

/// Inverse-CDF draw; falls back to the last positive entry on round-off.
fn sample_index(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &q) in p.iter().enumerate() {
        if q > 0.0 {
            acc += q;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Runs one episode. Agents with `record(i)` get a trajectory (rewards are
/// only sampled for them); the others get an empty one.
fn simulate<'p, R: Rng>(
    game: &NPlayerGame,
    policy_of: impl Fn(usize) -> &'p Policy,
    record: impl Fn(usize) -> bool,
    rng: &mut R,
) -> EpisodeOutcome {
    let d = game.dims();
    let n = game.num_players;
    let (ns, na) = (d.states, d.actions);
    let inv_n = 1.0 / n as f64;
    let mut states = game.initial_profile.clone();
    let mut actions = vec![0usize; n];
    let mut trajectories = vec![Vec::new(); n];
    let mut empirical_flow = vec![0.0; d.flat_len()];
    let mut probs = vec![0.0; na];
    let mut rows = vec![0.0; ns * na * ns];
    let mut have_row = vec![false; ns * na];
    for t in 0..d.horizon {
        let l_t = &mut empirical_flow[t * ns * na..(t + 1) * ns * na];
        for i in 0..n {
            let pi = policy_of(i);
            let s = states[i];
            for (a, p) in probs.iter_mut().enumerate() {
                *p = pi.prob(t, s, a);
            }
            let a = sample_index(&probs, rng.random());
            actions[i] = a;
            l_t[d.block_index(s, a)] += inv_n;
        }
        let l_t = &empirical_flow[t * ns * na..(t + 1) * ns * na];
        let last = t + 1 == d.horizon;
        have_row.fill(false);
        for i in 0..n {
            let (s, a) = (states[i], actions[i]);
            let reward = if record(i) {
                let noise = if game.reward_noise > 0.0 {
                    rng.random_range(-game.reward_noise..=game.reward_noise)
                } else {
                    0.0
                };
                game.model.reward(t, s, a, l_t) + noise
            } else {
                0.0
            };
            let next_state = if last {
                None
            } else {
                let b = d.block_index(s, a);
                let row = &mut rows[b * ns..(b + 1) * ns];
                if !have_row[b] {
                    game.model.transition_row_into(t, s, a, l_t, row);
                    have_row[b] = true;
                }
                Some(sample_index(row, rng.random()))
            };
            if record(i) {
                trajectories[i].push(Step {
                    state: s,
                    action: a,
                    reward,
                    next_state,
                });
            }
            if let Some(s1) = next_state {
                states[i] = s1;
            }
        }
    }
    EpisodeOutcome {
        trajectories,
        empirical_flow,
    }
}

/// Plays one episode with agent `i` following `policies[i]`.
pub fn play_episode<R: Rng>(game: &NPlayerGame, policies: &[Policy], rng: &mut R) -> Result<EpisodeOutcome, NPlayerError> {
    if policies.len() != game.num_players {
        return Err(NPlayerError::PolicyCount {
            expected: game.num_players,
            got: policies.len(),
        });
    }
    for p in policies {
        if p.dims() != game.dims() {
            return Err(ModelError::DimsMismatch {
                left: game.dims(),
                right: p.dims(),
            }
            .into());
        }
    }
    Ok(simulate(game, |i| &policies[i], |_| true, rng))
}

/// The explorer's trajectory from one exploration episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationEpisode {
    pub iteration: usize,
    pub episode: usize,
    pub explorer: usize,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplorationBatch {
    pub iteration: usize,
    pub episodes: Vec<ExplorationEpisode>,
}

impl ExplorationBatch {
    pub fn empty(iteration: usize) -> Self {
        Self {
            iteration,
            episodes: Vec::new(),
        }
    }

    /// Checks trajectory lengths and index ranges against `dims`.
    pub fn validate(&self, dims: Dims, num_players: usize) -> Result<(), NPlayerError> {
        for ep in &self.episodes {
            let bad = |what: String| NPlayerError::InvalidBatch(format!("iteration {} episode {}: {what}", ep.iteration, ep.episode));
            if ep.explorer >= num_players {
                return Err(bad(format!("explorer {} out of range", ep.explorer)));
            }
            if ep.steps.len() != dims.horizon {
                return Err(bad(format!("{} steps, expected {}", ep.steps.len(), dims.horizon)));
            }
            for (t, st) in ep.steps.iter().enumerate() {
                let next_ok = match st.next_state {
                    Some(s) => t + 1 < dims.horizon && s < dims.states,
                    None => t + 1 == dims.horizon,
                };
                if st.state >= dims.states || st.action >= dims.actions || !next_ok || !st.reward.is_finite() {
                    return Err(bad(format!("step {t} is out of range")));
                }
            }
        }
        Ok(())
    }
}

/// Collects `n_k` episodes in which one uniformly drawn agent explores with
/// the uniform policy while everyone else plays `policy`.
pub fn sample_explore(game: &NPlayerGame, policy: &Policy, n_k: usize, k: usize) -> Result<ExplorationBatch, NPlayerError> {
    if n_k == 0 {
        return Err(NPlayerError::InvalidParameter {
            field: "n_k",
            reason: "must be at least 1".into(),
        });
    }
    let d = game.dims();
    if policy.dims() != d {
        return Err(ModelError::DimsMismatch {
            left: d,
            right: policy.dims(),
        }
        .into());
    }
    let explore = uniform_policy(d.states, d.actions, d.horizon)?;
    let episodes = (0..n_k)
        .into_par_iter()
        .map(|l| {
            let mut rng = game.episode_rng(k, l);
            let explorer = rng.random_range(0..game.num_players);
            let mut out = simulate(game, |i| if i == explorer { &explore } else { policy }, |i| i == explorer, &mut rng);
            ExplorationEpisode {
                iteration: k,
                episode: l,
                explorer,
                steps: std::mem::take(&mut out.trajectories[explorer]),
            }
        })
        .collect();
    Ok(ExplorationBatch { iteration: k, episodes })
}

/// Conditional sample means of the reward per `(t, s, a)`; zero where unvisited.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardEstimate {
    pub dims: Dims,
    pub values: Vec<f64>,
    /// Visit counts `n_k(s, a, t)`, flow layout.
    pub counts: Vec<u64>,
}

pub fn estimate_rewards(dims: Dims, batch: &ExplorationBatch) -> Result<RewardEstimate, NPlayerError> {
    batch.validate(dims, usize::MAX)?;
    let mut sums = vec![0.0; dims.flat_len()];
    let mut counts = vec![0u64; dims.flat_len()];
    for ep in &batch.episodes {
        for (t, st) in ep.steps.iter().enumerate() {
            let i = dims.index(t, st.state, st.action);
            sums[i] += st.reward;
            counts[i] += 1;
        }
    }
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    Ok(RewardEstimate { dims, values, counts })
}

/// Transition counts `(t, s, a, s')` in kernel layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionCounts {
    dims: Dims,
    counts: Vec<u64>,
}

impl TransitionCounts {
    pub fn new(dims: Dims) -> Self {
        Self {
            dims,
            counts: vec![0; dims.transition_steps() * dims.state_actions() * dims.states],
        }
    }

    pub fn add_batch(&mut self, batch: &ExplorationBatch) -> Result<(), NPlayerError> {
        let d = self.dims;
        batch.validate(d, usize::MAX)?;
        for ep in &batch.episodes {
            for (t, st) in ep.steps.iter().enumerate() {
                if let Some(s1) = st.next_state {
                    self.counts[((t * d.states + st.state) * d.actions + st.action) * d.states + s1] += 1;
                }
            }
        }
        Ok(())
    }

    /// Number of observed transitions out of `(t, s, a)`.
    pub fn row_count(&self, t: usize, s: usize, a: usize) -> u64 {
        let d = self.dims;
        let start = ((t * d.states + s) * d.actions + a) * d.states;
        self.counts[start..start + d.states].iter().sum()
    }

    /// Empirical kernel; rows never visited equal `p0`.
    pub fn estimate(&self, p0: &[f64]) -> Result<TransitionTensor, NPlayerError> {
        let d = self.dims;
        if p0.len() != d.states {
            return Err(ModelError::ShapeMismatch {
                what: "p0",
                expected: d.states,
                got: p0.len(),
            }
            .into());
        }
        let counts = &self.counts;
        Ok(TransitionTensor::from_fn(d, |t, s, a, out| {
            let start = ((t * d.states + s) * d.actions + a) * d.states;
            let row = &counts[start..start + d.states];
            let total: u64 = row.iter().sum();
            if total == 0 {
                out.copy_from_slice(p0);
            } else {
                for (o, &c) in out.iter_mut().zip(row) {
                    *o = c as f64 / total as f64;
                }
            }
        }))
    }
}

/// Empirical kernel from every batch in `history`; `p0` where unvisited.
pub fn estimate_transitions(dims: Dims, history: &[ExplorationBatch], p0: &[f64]) -> Result<TransitionTensor, NPlayerError> {
    let mut counts = TransitionCounts::new(dims);
    for b in history {
        counts.add_batch(b)?;
    }
    counts.estimate(p0)
}

/// `c_hat = -R_hat` clamped to `[-r_max, r_max]`, with the estimated kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedModel {
    pub c_hat: Vec<f64>,
    pub p_hat: TransitionTensor,
    pub visit_counts: Vec<u64>,
    pub cumulative_counts: Vec<u64>,
}

pub fn assemble_estimates(rewards: &RewardEstimate, p_hat: TransitionTensor, cumulative_counts: Vec<u64>, r_max: f64) -> EstimatedModel {
    let c_hat = rewards.values.iter().map(|r| (-r).clamp(-r_max, r_max)).collect();
    EstimatedModel {
        c_hat,
        p_hat,
        visit_counts: rewards.counts.clone(),
        cumulative_counts,
    }
}

/// Smallest positive mass the uniform policy puts on a reachable `(t, s, a)`.
/// Mean-field dependent kernels are anchored at the uniform policy's own flow.
pub fn p_min(model: &MfgModel) -> Result<f64, NPlayerError> {
    let d = model.dims();
    let uniform = uniform_policy(d.states, d.actions, d.horizon)?;
    let (flow, reach) = if model.is_mean_field_dependent() {
        (mean_field_flow(&uniform, model)?, None)
    } else {
        (forward_flow(&uniform, model)?, Some(reachability(model)?))
    };
    let mut best = f64::INFINITY;
    for t in 0..d.horizon {
        for s in 0..d.states {
            if reach.as_ref().is_some_and(|r| r.is_unreachable(t, s)) {
                continue;
            }
            for a in 0..d.actions {
                let v = flow.get(t, s, a);
                if v > 0.0 {
                    best = best.min(v);
                }
            }
        }
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Err(NPlayerError::InvalidParameter {
            field: "model",
            reason: "no reachable state-action pair".into(),
        })
    }
}

/// Inputs of the high-probability estimation bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundInputs {
    pub dims: Dims,
    pub num_players: usize,
    pub c_r: f64,
    pub r_max: f64,
    /// Episodes in the current iteration.
    pub n_k: u64,
    /// Episodes up to and including the current iteration.
    pub cumulative: u64,
    pub delta: f64,
    pub p_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimationErrorBound {
    /// Bound on `||c_hat - c(d)||_2`.
    pub epsilon1: f64,
    /// Bound on the largest row-wise l1 error of `P_hat`.
    pub epsilon2: f64,
    pub delta: f64,
    pub p_min: f64,
    /// False when `n_k <= 2 log(2/delta) / p_min^2`; the bounds then carry no guarantee.
    pub precondition_met: bool,
}

pub fn error_bounds(inp: &BoundInputs) -> Result<EstimationErrorBound, NPlayerError> {
    check_bound_inputs(inp)?;
    let d = inp.dims;
    let (s, a, t) = (d.states as f64, d.actions as f64, d.horizon as f64);
    let log4 = (4.0 / inp.delta).ln();
    let cum = inp.cumulative as f64;
    let epsilon2 = 2.0 * s * (log4 / (inp.p_min * cum)).sqrt();
    let epsilon1 = (s * a * t).sqrt()
        * (mean_field_term(inp) + 2.0 * (inp.r_max * inp.r_max * log4 / (inp.p_min * inp.n_k as f64)).sqrt())
        + inp.c_r * s * s * a * t * (t - 1.0) * (log4 / (inp.p_min * cum)).sqrt();
    Ok(EstimationErrorBound {
        epsilon1,
        epsilon2,
        delta: inp.delta,
        p_min: inp.p_min,
        precondition_met: inp.n_k as f64 > 2.0 * (2.0 / inp.delta).ln() / (inp.p_min * inp.p_min),
    })
}

/// Per-entry reward error terms: mean-field approximation and concentration.
/// The execution term `C_R ||d_t - L_t||_1` depends on the iterate and is
/// left to the caller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardErrorTerms {
    pub mean_field: f64,
    pub concentration: f64,
}

pub fn reward_error_terms(inp: &BoundInputs) -> Result<RewardErrorTerms, NPlayerError> {
    check_bound_inputs(inp)?;
    let n = inp.n_k as f64;
    let denom = inp.p_min * n - ((2.0 / inp.delta).ln() * n / 2.0).sqrt();
    let concentration = if denom > 0.0 {
        (2.0 * inp.r_max * inp.r_max * (4.0 / inp.delta).ln() / denom).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(RewardErrorTerms {
        mean_field: mean_field_term(inp),
        concentration,
    })
}

fn mean_field_term(inp: &BoundInputs) -> f64 {
    let n = inp.num_players as f64;
    inp.c_r * (inp.dims.state_actions() as f64) * (1.0 / n + (std::f64::consts::PI / (2.0 * n)).sqrt())
}

fn check_bound_inputs(inp: &BoundInputs) -> Result<(), NPlayerError> {
    let bad = |field, reason: &str| {
        Err(NPlayerError::InvalidParameter {
            field,
            reason: reason.into(),
        })
    };
    if !(inp.delta > 0.0 && inp.delta < 1.0) {
        return bad("delta", "must lie in (0, 1)");
    }
    if !(inp.p_min > 0.0 && inp.p_min <= 1.0) {
        return bad("p_min", "must lie in (0, 1]");
    }
    if inp.n_k == 0 || inp.cumulative < inp.n_k {
        return bad("n_k", "need 0 < n_k <= cumulative");
    }
    if inp.num_players == 0 {
        return bad("num_players", "must be positive");
    }
    Ok(())
}

/// Exact NashConv of the profile where every agent plays `policy`: the mean
/// over agents of the best unilateral improvement, by dynamic programming on
/// the joint state chain. Cost grows like `(S^2 A)^N`; meant for tiny games.
pub fn nash_conv(game: &NPlayerGame, policy: &Policy) -> Result<f64, NPlayerError> {
    let d = game.dims();
    let n = game.num_players;
    if policy.dims() != d {
        return Err(ModelError::DimsMismatch {
            left: d,
            right: policy.dims(),
        }
        .into());
    }
    let (ns, na) = (d.states, d.actions);
    let work = (ns as u128).pow(2 * n as u32) * (na as u128).pow(n as u32);
    if work > 50_000_000 {
        return Err(NPlayerError::TooLarge(work));
    }
    let joint_states = ns.pow(n as u32);
    let joint_actions = na.pow(n as u32);
    let decode = |mut x: usize, base: usize, out: &mut [usize]| {
        for o in out.iter_mut() {
            *o = x % base;
            x /= base;
        }
    };
    let encode = |v: &[usize], base: usize| v.iter().rev().fold(0, |acc, &x| acc * base + x);
    let inv_n = 1.0 / n as f64;

    let mut total_gap = 0.0;
    let mut xs = vec![0usize; n];
    let mut acts = vec![0usize; n];
    let mut nexts = vec![0usize; n];
    let mut rows = vec![0.0; n * ns];
    let mut l = vec![0.0; ns * na];
    for agent in 0..n {
        // Values of agent `agent`: following `policy`, and best responding.
        let mut v_pi = vec![0.0; joint_states];
        let mut v_br = vec![0.0; joint_states];
        for t in (0..d.horizon).rev() {
            let mut new_pi = vec![0.0; joint_states];
            let mut new_br = vec![0.0; joint_states];
            for (x, (np, nb)) in new_pi.iter_mut().zip(new_br.iter_mut()).enumerate() {
                decode(x, ns, &mut xs);
                let mut q_pi = vec![0.0; na];
                let mut q_br = vec![0.0; na];
                for ja in 0..joint_actions {
                    decode(ja, na, &mut acts);
                    // Probability of the others' actions.
                    let mut w = 1.0;
                    for j in (0..n).filter(|&j| j != agent) {
                        w *= policy.prob(t, xs[j], acts[j]);
                    }
                    if w == 0.0 {
                        continue;
                    }
                    l.fill(0.0);
                    for j in 0..n {
                        l[d.block_index(xs[j], acts[j])] += inv_n;
                    }
                    let mut cont_pi = 0.0;
                    let mut cont_br = 0.0;
                    if t + 1 < d.horizon {
                        for j in 0..n {
                            game.model.transition_row_into(t, xs[j], acts[j], &l, &mut rows[j * ns..(j + 1) * ns]);
                        }
                        for y in 0..joint_states {
                            decode(y, ns, &mut nexts);
                            let p: f64 = (0..n).map(|j| rows[j * ns + nexts[j]]).product();
                            if p > 0.0 {
                                let y = encode(&nexts, ns);
                                cont_pi += p * v_pi[y];
                                cont_br += p * v_br[y];
                            }
                        }
                    }
                    let r = game.model.reward(t, xs[agent], acts[agent], &l);
                    q_pi[acts[agent]] += w * (r + cont_pi);
                    q_br[acts[agent]] += w * (r + cont_br);
                }
                // Each own action appears once per combination of the others'.
                *np = (0..na).map(|a| policy.prob(t, xs[agent], a) * q_pi[a]).sum();
                *nb = q_br.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            }
            v_pi = new_pi;
            v_br = new_br;
        }
        let x0 = encode(&game.initial_profile, ns);
        total_gap += (v_br[x0] - v_pi[x0]).max(0.0);
    }
    Ok(total_gap / n as f64)
}

/// Writes one JSON record per episode.
pub fn write_batches_jsonl<W: Write>(mut out: W, batches: &[ExplorationBatch]) -> Result<(), NPlayerError> {
    for b in batches {
        for ep in &b.episodes {
            serde_json::to_writer(&mut out, ep).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads records written by [`write_batches_jsonl`], grouping consecutive
/// episodes of the same iteration into a batch.
pub fn read_batches_jsonl<R: BufRead>(input: R) -> Result<Vec<ExplorationBatch>, NPlayerError> {
    let mut batches: Vec<ExplorationBatch> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: ExplorationEpisode = serde_json::from_str(&line).map_err(|e| NPlayerError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        match batches.last_mut() {
            Some(b) if b.iteration == ep.iteration => b.episodes.push(ep),
            _ => batches.push(ExplorationBatch {
                iteration: ep.iteration,
                episodes: vec![ep],
            }),
        }
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::propagate;
    use crate::model::{Transition, TransitionTensor};
    use crate::random::{random_policy, random_transitions};
    use std::sync::Arc;

    fn fixed_model(dims: Dims, seed: u64) -> MfgModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_transitions(dims, &mut rng);
        let mu0 = crate::random::dirichlet(dims.states, &mut rng);
        MfgModel::new(
            dims,
            mu0,
            Arc::new(move |t, s, a, l| ((t + 2 * s + 3 * a) as f64 * 0.1).sin() - l[dims.block_index(s, a)]),
            Transition::Fixed(p),
            2.0,
        )
        .unwrap()
        .with_lipschitz(1.0)
    }

    #[test]
    fn single_player_flow_is_a_point_mass() {
        let dims = Dims::new(3, 2, 4).unwrap();
        let game = NPlayerGame::new(fixed_model(dims, 1), 1, 5).unwrap();
        let pi = uniform_policy(3, 2, 4).unwrap();
        let out = play_episode(&game, &[pi], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for t in 0..dims.horizon {
            let step = out.trajectories[0][t];
            let l_t = &out.empirical_flow[t * 6..(t + 1) * 6];
            for (b, v) in l_t.iter().enumerate() {
                let want = if b == dims.block_index(step.state, step.action) { 1.0 } else { 0.0 };
                assert_eq!(*v, want);
            }
        }
    }

    #[test]
    fn deterministic_game_ignores_the_seed() {
        let dims = Dims::new(3, 2, 5).unwrap();
        let p = TransitionTensor::from_fn(dims, |_, s, a, out| {
            out.fill(0.0);
            out[(s + a + 1) % 3] = 1.0;
        });
        let model = MfgModel::new(dims, vec![1.0, 0.0, 0.0], Arc::new(|_, s, _, l| l[s]), Transition::Fixed(p), 1.0).unwrap();
        let game = NPlayerGame::with_profile(model, vec![0, 1, 2, 0], 0).unwrap();
        let pi = Policy::deterministic(dims, |t, s| (t + s) % 2);
        let policies = vec![pi; 4];
        let a = play_episode(&game, &policies, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = play_episode(&game, &policies, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn policy_count_mismatch_is_rejected() {
        let dims = Dims::new(2, 2, 2).unwrap();
        let game = NPlayerGame::new(fixed_model(dims, 0), 3, 0).unwrap();
        let pi = uniform_policy(2, 2, 2).unwrap();
        let err = play_episode(&game, &[pi.clone(), pi], &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, NPlayerError::PolicyCount { expected: 3, got: 2 }));
    }

    #[test]
    fn empirical_flow_concentrates_on_the_mean_field_flow() {
        let dims = Dims::new(3, 2, 3).unwrap();
        let n = 10_000;
        let game = NPlayerGame::new(fixed_model(dims, 2), n, 7).unwrap();
        let pi = uniform_policy(3, 2, 3).unwrap();
        let policies = vec![pi.clone(); n];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mean = vec![0.0; dims.flat_len()];
        let episodes = 100;
        for _ in 0..episodes {
            let out = play_episode(&game, &policies, &mut rng).unwrap();
            for (m, v) in mean.iter_mut().zip(&out.empirical_flow) {
                *m += v / episodes as f64;
            }
        }
        let exact = propagate(&pi, &game.empirical_mu0(), game.model().fixed_transitions().unwrap());
        let bound = 3.0 * 6.0 * (std::f64::consts::PI / (2.0 * n as f64)).sqrt();
        for t in 0..dims.horizon {
            let err: f64 = (0..6).map(|b| (mean[t * 6 + b] - exact.at(t)[b]).abs()).sum();
            assert!(err <= bound, "t={t}: {err} > {bound}");
        }
    }

    #[test]
    fn sampled_profile_stays_in_the_support() {
        let dims = Dims::new(4, 2, 2).unwrap();
        let model = fixed_model(dims, 0).with_mu0(vec![0.5, 0.0, 0.5, 0.0]).unwrap();
        let game = NPlayerGame::new(model, 500, 11).unwrap();
        assert!(game.initial_profile().iter().all(|&s| s == 0 || s == 2));
        let mu = game.empirical_mu0();
        assert!((mu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_player_always_explores() {
        let dims = Dims::new(2, 2, 3).unwrap();
        let game = NPlayerGame::new(fixed_model(dims, 0), 1, 0).unwrap();
        let pi = Policy::deterministic(dims, |_, _| 1);
        let batch = sample_explore(&game, &pi, 50, 1).unwrap();
        assert!(batch.episodes.iter().all(|e| e.explorer == 0));
        // Uniform exploration must use action 0 sometimes.
        assert!(batch.episodes.iter().flat_map(|e| &e.steps).any(|s| s.action == 0));
    }

    #[test]
    fn batch_has_requested_shape_and_is_reproducible() {
        let dims = Dims::new(2, 2, 4).unwrap();
        let game = NPlayerGame::new(fixed_model(dims, 0), 6, 3).unwrap();
        let pi = uniform_policy(2, 2, 4).unwrap();
        let a = sample_explore(&game, &pi, 20, 2).unwrap();
        assert_eq!(a.episodes.len(), 20);
        assert!(a.episodes.iter().all(|e| e.steps.len() == 4 && e.explorer < 6));
        let b = sample_explore(&game, &pi, 20, 2).unwrap();
        assert_eq!(a, b);
        // Serial execution gives the same episodes.
        for (l, ep) in a.episodes.iter().enumerate() {
            let mut rng = game.episode_rng(2, l);
            assert_eq!(rng.random_range(0..6), ep.explorer);
        }
        assert!(sample_explore(&game, &pi, 0, 2).is_err());
    }

    #[test]
    fn explorer_indices_are_uniform() {
        let dims = Dims::new(2, 2, 1).unwrap();
        let n = 5;
        let game = NPlayerGame::new(fixed_model(dims, 0), n, 17).unwrap();
        let pi = uniform_policy(2, 2, 1).unwrap();
        let batch = sample_explore(&game, &pi, 10_000, 0).unwrap();
        let mut counts = vec![0.0; n];
        for e in &batch.episodes {
            counts[e.explorer] += 1.0;
        }
        let expected = 10_000.0 / n as f64;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // 0.99 quantile of chi-square with 4 degrees of freedom.
        assert!(chi2 < 13.277, "{chi2}");
    }

    #[test]
    fn empty_batch_gives_defaults() {
        let dims = Dims::new(3, 2, 3).unwrap();
        let r = estimate_rewards(dims, &ExplorationBatch::empty(0)).unwrap();
        assert!(r.values.iter().all(|&v| v == 0.0));
        let p0 = [0.2, 0.3, 0.5];
        let p = estimate_transitions(dims, &[], &p0).unwrap();
        for t in 0..2 {
            for s in 0..3 {
                for a in 0..2 {
                    assert_eq!(p.row(t, s, a), &p0);
                }
            }
        }
    }

    #[test]
    fn single_noiseless_visit_is_recovered_exactly() {
        let dims = Dims::new(2, 2, 2).unwrap();
        let step = |s, a, r, n| Step {
            state: s,
            action: a,
            reward: r,
            next_state: n,
        };
        let batch = ExplorationBatch {
            iteration: 0,
            episodes: vec![ExplorationEpisode {
                iteration: 0,
                episode: 0,
                explorer: 0,
                steps: vec![step(1, 0, 0.75, Some(0)), step(0, 1, -0.25, None)],
            }],
        };
        let r = estimate_rewards(dims, &batch).unwrap();
        assert_eq!(r.values[dims.index(0, 1, 0)], 0.75);
        assert_eq!(r.values[dims.index(1, 0, 1)], -0.25);
        assert_eq!(r.counts.iter().sum::<u64>(), 2);
        let p = estimate_transitions(dims, std::slice::from_ref(&batch), &[0.5, 0.5]).unwrap();
        assert_eq!(p.row(0, 1, 0), &[1.0, 0.0]);
        assert_eq!(p.row(0, 0, 0), &[0.5, 0.5]);
    }

    #[test]
    fn malformed_batches_are_rejected() {
        let dims = Dims::new(2, 2, 2).unwrap();
        let batch = ExplorationBatch {
            iteration: 0,
            episodes: vec![ExplorationEpisode {
                iteration: 0,
                episode: 0,
                explorer: 0,
                steps: vec![Step {
                    state: 5,
                    action: 0,
                    reward: 0.0,
                    next_state: Some(0),
                }],
            }],
        };
        assert!(estimate_rewards(dims, &batch).is_err());
    }

    #[test]
    fn transition_error_shrinks_with_more_samples() {
        // Mean row TV error over repeated runs at n and 4n samples per row.
        let dims = Dims::new(3, 2, 2).unwrap();
        let model = fixed_model(dims, 4);
        let truth = model.fixed_transitions().unwrap().clone();
        let game = NPlayerGame::new(model, 1, 0).unwrap();
        let pi = uniform_policy(3, 2, 2).unwrap();
        let mean_error = |episodes: usize| {
            let mut total = 0.0;
            let runs = 40;
            for run in 0..runs {
                let batch = sample_explore(&game, &pi, episodes, 1000 + run).unwrap();
                let mut counts = TransitionCounts::new(dims);
                counts.add_batch(&batch).unwrap();
                let est = counts.estimate(&[1.0 / 3.0; 3]).unwrap();
                // The single player always starts in the same state; only visited rows count.
                for s in 0..3 {
                    for a in 0..2 {
                        if counts.row_count(0, s, a) > 0 {
                            total += est.row(0, s, a).iter().zip(truth.row(0, s, a)).map(|(x, y)| (x - y).abs()).sum::<f64>();
                        }
                    }
                }
            }
            total / runs as f64
        };
        let coarse = mean_error(400);
        let fine = mean_error(1600);
        assert!(coarse / fine >= 1.3, "{coarse} vs {fine}");
    }

    #[test]
    fn estimates_map_to_negated_clamped_costs() {
        let dims = Dims::new(2, 3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let values: Vec<f64> = (0..dims.flat_len()).map(|_| rng.random_range(-1.5..1.5)).collect();
        let mut r = RewardEstimate {
            dims,
            values: values.clone(),
            counts: vec![1; dims.flat_len()],
        };
        r.values[3] = 2.0;
        let p = TransitionTensor::constant(dims, &[0.5, 0.5]).unwrap();
        let est = assemble_estimates(&r, p, vec![1; dims.flat_len()], 1.0);
        assert_eq!(est.c_hat[3], -1.0);
        for t in 0..2 {
            for s in 0..2 {
                for a in 0..3 {
                    let i = dims.index(t, s, a);
                    if i != 3 {
                        assert_eq!(est.c_hat[i], (-r.values[i]).clamp(-1.0, 1.0));
                    }
                }
            }
        }
        let zero = RewardEstimate {
            dims,
            values: vec![0.0; dims.flat_len()],
            counts: vec![0; dims.flat_len()],
        };
        let p = TransitionTensor::constant(dims, &[0.5, 0.5]).unwrap();
        assert!(assemble_estimates(&zero, p, vec![0; dims.flat_len()], 1.0).c_hat.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn bounds_follow_their_closed_forms() {
        let dims = Dims::new(2, 2, 3).unwrap();
        let model = fixed_model(dims, 0);
        let pm = p_min(&model).unwrap();
        assert!(pm > 0.0 && pm <= 0.5);
        let inp = BoundInputs {
            dims,
            num_players: 50,
            c_r: 1.0,
            r_max: 2.0,
            n_k: 20,
            cumulative: 20,
            delta: 0.05,
            p_min: pm,
        };
        let b = error_bounds(&inp).unwrap();
        assert!(b.epsilon1.is_finite() && b.epsilon1 > 0.0 && b.epsilon2 > 0.0);
        let doubled = error_bounds(&BoundInputs { cumulative: 40, ..inp }).unwrap();
        assert!((b.epsilon2 / doubled.epsilon2 - 2f64.sqrt()).abs() < 1e-12);
        let need = 2.0 * (2.0f64 / 0.05).ln() / (pm * pm);
        let ok = error_bounds(&BoundInputs {
            n_k: need.floor() as u64 + 1,
            cumulative: need.floor() as u64 + 1,
            ..inp
        })
        .unwrap();
        assert!(ok.precondition_met);
        let short = error_bounds(&BoundInputs {
            n_k: need.floor() as u64,
            cumulative: need.floor() as u64,
            ..inp
        })
        .unwrap();
        assert!(!short.precondition_met);
        assert!(error_bounds(&BoundInputs { delta: 0.0, ..inp }).is_err());
    }

    #[test]
    fn p_min_skips_unreachable_states() {
        let dims = Dims::new(3, 2, 2).unwrap();
        let p = TransitionTensor::constant(dims, &[0.5, 0.5, 0.0]).unwrap();
        let model = MfgModel::new(dims, vec![0.75, 0.25, 0.0], Arc::new(|_, _, _, _| 0.0), Transition::Fixed(p), 1.0).unwrap();
        // Uniform over two actions: 0.25 * 0.5 at t = 0, then 0.25 each.
        assert_eq!(p_min(&model).unwrap(), 0.125);
    }

    /// Two players, brute force over complete joint histories.
    fn nash_conv_brute_force(game: &NPlayerGame, pi: &Policy) -> f64 {
        let d = game.dims();
        let (ns, na) = (d.states, d.actions);
        // Agent 0's value when it plays deterministic plan `plan(t, own, other)`
        // or follows `pi` (plan = None), summed over every joint history.
        fn value(game: &NPlayerGame, pi: &Policy, me: usize, plan: Option<&[usize]>, t: usize, xs: [usize; 2]) -> f64 {
            let d = game.dims();
            let (ns, na) = (d.states, d.actions);
            if t == d.horizon {
                return 0.0;
            }
            let other = 1 - me;
            let mut total = 0.0;
            for am in 0..na {
                let pm = match plan {
                    Some(p) => (p[(t * ns + xs[me]) * ns + xs[other]] == am) as u8 as f64,
                    None => pi.prob(t, xs[me], am),
                };
                for ao in 0..na {
                    let w = pm * pi.prob(t, xs[other], ao);
                    if w == 0.0 {
                        continue;
                    }
                    let mut acts = [0; 2];
                    acts[me] = am;
                    acts[other] = ao;
                    let mut l = vec![0.0; ns * na];
                    for j in 0..2 {
                        l[d.block_index(xs[j], acts[j])] += 0.5;
                    }
                    let mut v = game.model().reward(t, xs[me], am, &l);
                    if t + 1 < d.horizon {
                        let mut r0 = vec![0.0; ns];
                        let mut r1 = vec![0.0; ns];
                        game.model().transition_row_into(t, xs[0], acts[0], &l, &mut r0);
                        game.model().transition_row_into(t, xs[1], acts[1], &l, &mut r1);
                        for y0 in 0..ns {
                            for y1 in 0..ns {
                                let p = r0[y0] * r1[y1];
                                if p > 0.0 {
                                    v += p * value(game, pi, me, plan, t + 1, [y0, y1]);
                                }
                            }
                        }
                    }
                    total += w * v;
                }
            }
            total
        }
        let x0 = [game.initial_profile()[0], game.initial_profile()[1]];
        let plans = na.pow((d.horizon * ns * ns) as u32);
        let mut gap = 0.0;
        for me in 0..2 {
            let base = value(game, pi, me, None, 0, x0);
            let mut best = f64::NEG_INFINITY;
            for code in 0..plans {
                let mut c = code;
                let plan: Vec<usize> = (0..d.horizon * ns * ns)
                    .map(|_| {
                        let a = c % na;
                        c /= na;
                        a
                    })
                    .collect();
                best = best.max(value(game, pi, me, Some(&plan), 0, x0));
            }
            gap += best - base;
        }
        gap / 2.0
    }

    #[test]
    fn nash_conv_matches_brute_force_on_two_players() {
        let dims = Dims::new(2, 2, 2).unwrap();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = fixed_model(dims, seed);
            let game = NPlayerGame::with_profile(model, vec![0, (seed % 2) as usize], seed).unwrap();
            let pi = random_policy(dims, &mut rng);
            let exact = nash_conv(&game, &pi).unwrap();
            let brute = nash_conv_brute_force(&game, &pi);
            assert!((exact - brute).abs() < 1e-12, "{exact} vs {brute}");
            assert!(exact >= 0.0);
        }
    }

    #[test]
    fn nash_conv_vanishes_for_dominant_strategy() {
        // Reward independent of others, action 1 always better.
        let dims = Dims::new(2, 2, 3).unwrap();
        let p = TransitionTensor::constant(dims, &[0.5, 0.5]).unwrap();
        let model = MfgModel::new(dims, vec![0.5, 0.5], Arc::new(|_, _, a, _| a as f64), Transition::Fixed(p), 1.0).unwrap();
        let game = NPlayerGame::with_profile(model, vec![0, 1, 1], 0).unwrap();
        let best = Policy::deterministic(dims, |_, _| 1);
        assert!(nash_conv(&game, &best).unwrap().abs() < 1e-14);
        let worst = Policy::deterministic(dims, |_, _| 0);
        assert!((nash_conv(&game, &worst).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn jsonl_roundtrip() {
        let dims = Dims::new(2, 2, 3).unwrap();
        let game = NPlayerGame::new(fixed_model(dims, 0), 4, 1).unwrap().with_reward_noise(0.1).unwrap();
        let pi = uniform_policy(2, 2, 3).unwrap();
        let batches = vec![sample_explore(&game, &pi, 3, 1).unwrap(), sample_explore(&game, &pi, 2, 2).unwrap()];
        let mut buf = Vec::new();
        write_batches_jsonl(&mut buf, &batches).unwrap();
        assert_eq!(buf.iter().filter(|&&c| c == b'\n').count(), 5);
        let back = read_batches_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, batches);
        assert!(matches!(read_batches_jsonl(&b"{bad"[..]), Err(NPlayerError::Parse { line: 1, .. })));
    }

    #[test]
    fn reward_noise_is_bounded_and_centered() {
        let dims = Dims::new(1, 1, 1).unwrap();
        let model = MfgModel::new(
            dims,
            vec![1.0],
            Arc::new(|_, _, _, _| 0.5),
            Transition::Fixed(TransitionTensor::constant(dims, &[1.0]).unwrap()),
            1.0,
        )
        .unwrap();
        let game = NPlayerGame::new(model, 1, 0).unwrap().with_reward_noise(0.2).unwrap();
        let pi = uniform_policy(1, 1, 1).unwrap();
        let batch = sample_explore(&game, &pi, 4000, 0).unwrap();
        let rewards: Vec<f64> = batch.episodes.iter().map(|e| e.steps[0].reward).collect();
        assert!(rewards.iter().all(|r| (r - 0.5).abs() <= 0.2));
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        // Standard error of the mean is 0.2 / sqrt(3 * 4000).
        assert!((mean - 0.5).abs() < 5.0 * 0.2 / (3.0f64 * 4000.0).sqrt());
        assert!(NPlayerGame::new(game.model().clone(), 1, 0).unwrap().with_reward_noise(-1.0).is_err());
    }
}
