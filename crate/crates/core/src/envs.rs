//! Built-in environments and the TOML environment file format.
//!
//! A config file looks like
//!
//! ```toml
//! format_version = 1
//! reward_noise = 0.0
//!
//! [environment]
//! name = "sis"
//! beta = 0.81
//! rho = 0.3
//! c_dist = 0.5
//! c_inf = 1.0
//! horizon = 50
//! mu0 = [0.6, 0.4]
//! ```
//!
//! `name` selects one of `sis`, `building_evacuation`, `random_linear` or
//! `linear`; the remaining keys are the fields of the matching parameter
//! struct. `linear` stores every tensor explicitly and round-trips losslessly.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Dims, MfgModel, ModelError, Transition, TransitionTensor};

pub const FORMAT_VERSION: i64 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid value for `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },
    #[error("unknown environment `{0}` (expected sis, building_evacuation, random_linear or linear)")]
    UnknownEnvironment(String),
    #[error("unsupported format_version {0} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion(i64),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> EnvError {
    EnvError::InvalidParameter {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn check_unit(field: &str, v: f64) -> Result<(), EnvError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(invalid(field, format!("{v} is outside [0, 1]")));
    }
    Ok(())
}

fn check_nonneg(field: &str, v: f64) -> Result<(), EnvError> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(invalid(field, format!("{v} must be a nonnegative finite number")));
    }
    Ok(())
}

fn check_positive(field: &str, v: usize) -> Result<(), EnvError> {
    if v == 0 {
        return Err(invalid(field, "must be positive"));
    }
    Ok(())
}

// ---------------------------------------------------------------- SIS

pub const SUSCEPTIBLE: usize = 0;
pub const INFECTED: usize = 1;
pub const GO_OUT: usize = 0;
pub const DISTANCE: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SisParams {
    /// Infection coefficient: a susceptible agent going out is infected with
    /// probability `beta * mu_t(Infected)`.
    pub beta: f64,
    /// Per-step recovery probability.
    pub rho: f64,
    pub c_dist: f64,
    pub c_inf: f64,
    pub horizon: usize,
    /// Initial (susceptible, infected) split.
    pub mu0: [f64; 2],
}

impl Default for SisParams {
    fn default() -> Self {
        Self {
            beta: 0.81,
            rho: 0.3,
            c_dist: 0.5,
            c_inf: 1.0,
            horizon: 50,
            mu0: [0.6, 0.4],
        }
    }
}

/// Susceptible-infected game with mean-field dependent infection risk.
pub fn make_sis(p: &SisParams) -> Result<MfgModel, EnvError> {
    check_unit("beta", p.beta)?;
    check_unit("rho", p.rho)?;
    check_nonneg("c_dist", p.c_dist)?;
    check_nonneg("c_inf", p.c_inf)?;
    check_positive("horizon", p.horizon)?;
    let dims = Dims::new(2, 2, p.horizon)?;
    let (beta, rho, c_dist, c_inf) = (p.beta, p.rho, p.c_dist, p.c_inf);
    let reward = Arc::new(move |_t: usize, s: usize, a: usize, _l: &[f64]| {
        -c_dist * f64::from(a == DISTANCE) - c_inf * f64::from(s == INFECTED)
    });
    let transition = Arc::new(move |_t: usize, s: usize, a: usize, l: &[f64], out: &mut [f64]| {
        if s == INFECTED {
            out[SUSCEPTIBLE] = rho;
            out[INFECTED] = 1.0 - rho;
            return;
        }
        let infected = (l[dims.block_index(INFECTED, GO_OUT)] + l[dims.block_index(INFECTED, DISTANCE)]).clamp(0.0, 1.0);
        let p_inf = if a == GO_OUT { (beta * infected).clamp(0.0, 1.0) } else { 0.0 };
        out[SUSCEPTIBLE] = 1.0 - p_inf;
        out[INFECTED] = p_inf;
    });
    let r_max = if c_dist + c_inf > 0.0 { c_dist + c_inf } else { 1.0 };
    let model = MfgModel::new(dims, p.mu0.to_vec(), reward, Transition::MeanFieldDependent(transition), r_max)?
        .with_lipschitz(0.0)
        .with_monotonicity(0.0);
    Ok(model)
}

// ---------------------------------------------------- building evacuation

pub const MOVE_UP: usize = 0;
pub const MOVE_DOWN: usize = 1;
pub const MOVE_LEFT: usize = 2;
pub const MOVE_RIGHT: usize = 3;
pub const STAY: usize = 4;
pub const DESCEND: usize = 5;
pub const EVACUATION_ACTIONS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvacuationParams {
    pub floors: usize,
    pub length: usize,
    pub width: usize,
    pub horizon: usize,
    pub c_floor: f64,
    pub c_crowd: f64,
}

impl Default for EvacuationParams {
    fn default() -> Self {
        Self {
            floors: 3,
            length: 5,
            width: 5,
            horizon: 5,
            c_floor: 1.0,
            c_crowd: 1.0,
        }
    }
}

impl EvacuationParams {
    pub fn state(&self, floor: usize, row: usize, col: usize) -> usize {
        (floor * self.length + row) * self.width + col
    }

    pub fn coords(&self, s: usize) -> (usize, usize, usize) {
        let per_floor = self.length * self.width;
        (s / per_floor, (s % per_floor) / self.width, s % self.width)
    }

    pub fn is_staircase(&self, row: usize, col: usize) -> bool {
        (row == 0 && col == 0) || (row == self.length - 1 && col == self.width - 1)
    }

    /// Deterministic successor of `(s, a)`.
    pub fn successor(&self, s: usize, a: usize) -> usize {
        let (f, r, c) = self.coords(s);
        match a {
            MOVE_UP if r > 0 => self.state(f, r - 1, c),
            MOVE_DOWN if r + 1 < self.length => self.state(f, r + 1, c),
            MOVE_LEFT if c > 0 => self.state(f, r, c - 1),
            MOVE_RIGHT if c + 1 < self.width => self.state(f, r, c + 1),
            DESCEND if f > 0 && self.is_staircase(r, c) => self.state(f - 1, r, c),
            _ => s,
        }
    }
}

/// Multi-floor grid where agents head for the ground floor through two
/// corner staircases while avoiding crowded state-action pairs.
pub fn make_building_evacuation(p: &EvacuationParams) -> Result<MfgModel, EnvError> {
    check_positive("floors", p.floors)?;
    check_positive("length", p.length)?;
    check_positive("width", p.width)?;
    check_positive("horizon", p.horizon)?;
    check_nonneg("c_floor", p.c_floor)?;
    check_nonneg("c_crowd", p.c_crowd)?;
    let per_floor = p.length * p.width;
    let dims = Dims::new(p.floors * per_floor, EVACUATION_ACTIONS, p.horizon)?;
    let params = p.clone();
    let kernel = TransitionTensor::from_fn(dims, |_, s, a, out| {
        out.fill(0.0);
        out[params.successor(s, a)] = 1.0;
    });
    let (c_floor, c_crowd, floors) = (p.c_floor, p.c_crowd, p.floors as f64);
    let reward = Arc::new(move |_t: usize, s: usize, a: usize, l: &[f64]| {
        let floor = (s / per_floor) as f64;
        -c_floor * floor / floors - c_crowd * l[dims.block_index(s, a)]
    });
    let mut mu0 = vec![0.0; dims.states];
    let top = (p.floors - 1) * per_floor;
    mu0[top..].iter_mut().for_each(|m| *m = 1.0 / per_floor as f64);
    let r_max = if c_floor + c_crowd > 0.0 { c_floor + c_crowd } else { 1.0 };
    Ok(MfgModel::new(dims, mu0, reward, Transition::Fixed(kernel), r_max)?
        .with_lipschitz(c_crowd)
        .with_monotonicity(c_crowd))
}

// ------------------------------------------------------- linear games

/// Game with affine rewards `R_t(s,a,L) = base[t,s,a] + sum_j W[t,(s,a),j] L_t[j]`
/// and transitions `softmax_{s'}(logits[t,s,a,s'] + sum_j V[t,s,a,s',j] L_t[j])`.
///
/// State-action pairs `j` use the flow block order `a * S + s`. Tensors are
/// flat, row-major in the index order written above; `coupling` may be empty
/// for mean-field independent dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearGameSpec {
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub mu0: Vec<f64>,
    /// `T * S * A` entries, index `(t * S + s) * A + a`.
    pub base: Vec<f64>,
    /// `T * SA * SA` entries, index `(t * SA + i) * SA + j` with `i = a * S + s`.
    pub interaction: Vec<f64>,
    /// `(T-1) * S * A * S` entries, index `((t * S + s) * A + a) * S + s'`.
    pub logits: Vec<f64>,
    /// `(T-1) * S * A * S * SA` entries or empty.
    #[serde(default)]
    pub coupling: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomLinearParams {
    pub states: usize,
    pub actions: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Multiplier on the standard-normal transition coupling `V`.
    #[serde(default = "default_coupling_scale")]
    pub coupling_scale: f64,
}

fn default_coupling_scale() -> f64 {
    1.0
}

impl Default for RandomLinearParams {
    fn default() -> Self {
        Self {
            states: 10,
            actions: 10,
            horizon: 10,
            seed: 0,
            coupling_scale: default_coupling_scale(),
        }
    }
}

impl LinearGameSpec {
    pub fn dims(&self) -> Result<Dims, EnvError> {
        Ok(Dims::new(self.states, self.actions, self.horizon)?)
    }

    /// Standard-normal coefficients: `base` unscaled, `interaction` scaled by
    /// `1/(S A)`, `logits` unscaled, `coupling` scaled by `coupling_scale`.
    pub fn random(p: &RandomLinearParams) -> Result<Self, EnvError> {
        check_nonneg("coupling_scale", p.coupling_scale)?;
        let dims = Dims::new(p.states, p.actions, p.horizon)?;
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let sa = dims.state_actions();
        let mut normal = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                })
                .collect()
        };
        let steps = dims.transition_steps();
        let base = normal(dims.flat_len(), 1.0);
        let interaction = normal(p.horizon * sa * sa, 1.0 / sa as f64);
        let logits = normal(steps * sa * p.states, 1.0);
        let coupling = normal(steps * sa * p.states * sa, p.coupling_scale);
        Ok(Self {
            states: p.states,
            actions: p.actions,
            horizon: p.horizon,
            mu0: vec![1.0 / p.states as f64; p.states],
            base,
            interaction,
            logits,
            coupling,
        })
    }

    fn validate(&self) -> Result<Dims, EnvError> {
        let dims = self.dims()?;
        let sa = dims.state_actions();
        let steps = dims.transition_steps();
        let expect = |field: &str, got: usize, want: usize| -> Result<(), EnvError> {
            if got != want {
                return Err(invalid(field, format!("expected {want} entries, got {got}")));
            }
            Ok(())
        };
        expect("mu0", self.mu0.len(), dims.states)?;
        expect("base", self.base.len(), dims.flat_len())?;
        expect("interaction", self.interaction.len(), dims.horizon * sa * sa)?;
        expect("logits", self.logits.len(), steps * sa * dims.states)?;
        if !self.coupling.is_empty() {
            expect("coupling", self.coupling.len(), steps * sa * dims.states * sa)?;
        }
        for (field, values) in [
            ("mu0", &self.mu0),
            ("base", &self.base),
            ("interaction", &self.interaction),
            ("logits", &self.logits),
            ("coupling", &self.coupling),
        ] {
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                return Err(invalid(field, format!("entry {i} is not finite")));
            }
        }
        Ok(dims)
    }

    /// `max |base| + max_i sum_j |W[t, i, j]|`.
    pub fn reward_bound(&self) -> f64 {
        let sa = self.states * self.actions;
        let base = self.base.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let rows = self
            .interaction
            .chunks(sa)
            .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0f64, f64::max);
        base + rows
    }

    /// Largest `|W|` entry: a Lipschitz constant in `||L_t||_1`.
    pub fn lipschitz_constant(&self) -> f64 {
        self.interaction.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `min_t -lambda_max(sym(W_t))`; positive means strongly monotone.
    pub fn monotonicity_constant(&self) -> f64 {
        let sa = self.states * self.actions;
        (0..self.horizon)
            .map(|t| {
                let block = &self.interaction[t * sa * sa..(t + 1) * sa * sa];
                let w = DMatrix::from_row_slice(sa, sa, block);
                let sym = (&w + w.transpose()) * 0.5;
                -sym.symmetric_eigenvalues().max()
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_model(&self) -> Result<MfgModel, EnvError> {
        let dims = self.validate()?;
        let (s_n, a_n) = (dims.states, dims.actions);
        let sa = dims.state_actions();
        let base = Arc::new(self.base.clone());
        let interaction = Arc::new(self.interaction.clone());
        let reward = Arc::new(move |t: usize, s: usize, a: usize, l: &[f64]| {
            let i = dims.block_index(s, a);
            let row = &interaction[(t * sa + i) * sa..(t * sa + i + 1) * sa];
            base[(t * s_n + s) * a_n + a] + row.iter().zip(l).map(|(w, x)| w * x).sum::<f64>()
        });
        let logits = Arc::new(self.logits.clone());
        let transition = if self.coupling.iter().all(|&v| v == 0.0) {
            Transition::Fixed(TransitionTensor::from_fn(dims, |t, s, a, out| {
                let off = ((t * s_n + s) * a_n + a) * s_n;
                softmax_into(&logits[off..off + s_n], out);
            }))
        } else {
            let coupling = Arc::new(self.coupling.clone());
            Transition::MeanFieldDependent(Arc::new(move |t: usize, s: usize, a: usize, l: &[f64], out: &mut [f64]| {
                let off = ((t * s_n + s) * a_n + a) * s_n;
                for (next, o) in out.iter_mut().enumerate() {
                    let row = &coupling[(off + next) * sa..(off + next + 1) * sa];
                    *o = logits[off + next] + row.iter().zip(l).map(|(v, x)| v * x).sum::<f64>();
                }
                let scores = out.to_vec();
                softmax_into(&scores, out);
            }))
        };
        let bound = self.reward_bound();
        let r_max = if bound > 0.0 { bound * (1.0 + 1e-12) } else { 1.0 };
        let mut model = MfgModel::new(dims, self.mu0.clone(), reward, transition, r_max)?.with_lipschitz(self.lipschitz_constant());
        let lambda = self.monotonicity_constant();
        if lambda >= 0.0 {
            model = model.with_monotonicity(lambda);
        }
        Ok(model)
    }
}

fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(scores) {
        *o = (v - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// Seeded random linear game with default coupling scale.
pub fn make_random_linear(states: usize, actions: usize, horizon: usize, seed: u64) -> Result<MfgModel, EnvError> {
    LinearGameSpec::random(&RandomLinearParams {
        states,
        actions,
        horizon,
        seed,
        coupling_scale: default_coupling_scale(),
    })?
    .to_model()
}

// ----------------------------------------------------------- configs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum EnvSpec {
    Sis(SisParams),
    BuildingEvacuation(EvacuationParams),
    RandomLinear(RandomLinearParams),
    Linear(LinearGameSpec),
}

impl EnvSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EnvSpec::Sis(_) => "sis",
            EnvSpec::BuildingEvacuation(_) => "building_evacuation",
            EnvSpec::RandomLinear(_) => "random_linear",
            EnvSpec::Linear(_) => "linear",
        }
    }

    pub fn build(&self) -> Result<MfgModel, EnvError> {
        match self {
            EnvSpec::Sis(p) => make_sis(p),
            EnvSpec::BuildingEvacuation(p) => make_building_evacuation(p),
            EnvSpec::RandomLinear(p) => LinearGameSpec::random(p)?.to_model(),
            EnvSpec::Linear(spec) => spec.to_model(),
        }
    }

    /// Default parameters of a built-in environment.
    pub fn default_for(name: &str) -> Result<Self, EnvError> {
        match name {
            "sis" => Ok(EnvSpec::Sis(SisParams::default())),
            "building_evacuation" => Ok(EnvSpec::BuildingEvacuation(EvacuationParams::default())),
            "random_linear" => Ok(EnvSpec::RandomLinear(RandomLinearParams::default())),
            other => Err(EnvError::UnknownEnvironment(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub format_version: i64,
    /// Amplitude of the additive uniform noise on sampled rewards.
    #[serde(default)]
    pub reward_noise: f64,
    pub environment: EnvSpec,
}

impl EnvConfig {
    pub fn new(environment: EnvSpec) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            reward_noise: 0.0,
            environment,
        }
    }

    pub fn build(&self) -> Result<MfgModel, EnvError> {
        check_nonneg("reward_noise", self.reward_noise)?;
        self.environment.build()
    }

    pub fn to_toml(&self) -> Result<String, EnvError> {
        toml::to_string(self).map_err(|e| EnvError::Parse(e.to_string()))
    }

    /// Parses and validates a config. Integer fields are range-checked before
    /// typed decoding so errors name the offending key.
    pub fn from_toml(text: &str) -> Result<Self, EnvError> {
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| EnvError::Parse(e.to_string()))?;
        match raw.get("format_version") {
            Some(toml::Value::Integer(v)) if *v == FORMAT_VERSION => {}
            Some(toml::Value::Integer(v)) => return Err(EnvError::UnsupportedVersion(*v)),
            Some(_) => return Err(invalid("format_version", "must be an integer")),
            None => return Err(invalid("format_version", "missing")),
        }
        let env = match raw.get("environment") {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(invalid("environment", "missing [environment] table")),
        };
        match env.get("name") {
            Some(toml::Value::String(n)) if ["sis", "building_evacuation", "random_linear", "linear"].contains(&n.as_str()) => {}
            Some(toml::Value::String(n)) => return Err(EnvError::UnknownEnvironment(n.clone())),
            _ => return Err(invalid("environment.name", "missing or not a string")),
        }
        for key in ["horizon", "states", "actions", "floors", "length", "width", "seed"] {
            if let Some(v) = env.get(key) {
                match v {
                    toml::Value::Integer(i) if *i < 0 || (*i == 0 && key != "seed") => {
                        return Err(invalid(&format!("environment.{key}"), format!("{i} must be positive")));
                    }
                    toml::Value::Integer(_) => {}
                    _ => return Err(invalid(&format!("environment.{key}"), "must be an integer")),
                }
            }
        }
        let config: EnvConfig = toml::from_str(text).map_err(|e| EnvError::Parse(e.to_string()))?;
        check_nonneg("reward_noise", config.reward_noise)?;
        Ok(config)
    }
}

pub fn load_env(path: &Path) -> Result<EnvConfig, EnvError> {
    let text = std::fs::read_to_string(path).map_err(|e| EnvError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    EnvConfig::from_toml(&text).map_err(|e| match e {
        EnvError::Parse(msg) => EnvError::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_env(config: &EnvConfig, path: &Path) -> Result<(), EnvError> {
    let text = config.to_toml()?;
    std::fs::write(path, text).map_err(|e| EnvError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}
