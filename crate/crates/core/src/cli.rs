//! The `mfoml` command line: solve, learn, benchmark, gen-config and replay.
//!
//! Every run writes its outputs atomically (temporary file plus rename) and a
//! JSON manifest next to them. The manifest embeds the parsed invocation and
//! the environment config, so `mfoml replay <manifest>` reproduces the
//! outputs. Timing columns are the only nondeterministic content; pass
//! `--no-timing` to zero them for byte-identical reruns.
//!
//! Exit codes: 0 converged (or completed), 2 iteration budget exhausted,
//! 64 usage error, 65 bad config or data, 70 solver failure, 74 I/O failure.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fictitious_play, online_mirror_descent, BaselineOptions};
use crate::envs::{load_env, EnvConfig, EnvSpec};
use crate::model::{uniform_policy, MfgModel};
use crate::nplayer::write_batches_jsonl;
use crate::oml::{aggregate, run_seeds, EpisodeSchedule, OmlConfig, RegretTrace, TransitionHistory};
use crate::solver::{solve_mfomi_fbs, AnchorRule, SolverOptions, SolverSchedule, SolverTrace, Termination};

pub const EXIT_CONVERGED: i32 = 0;
pub const EXIT_BUDGET: i32 = 2;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_DATA: i32 = 65;
pub const EXIT_SOFTWARE: i32 = 70;
pub const EXIT_IO: i32 = 74;

/// Environment variable naming the default output directory.
pub const OUT_DIR_VAR: &str = "MFOML_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "mfoml-out";
const MANIFEST_VERSION: u32 = 1;

/// Step sizes tried by `benchmark` for the splitting solver.
pub const FBS_ALPHA_GRID: [f64; 4] = [0.01, 0.1, 1.0, 10.0];
/// Learning rates tried by `benchmark` for online mirror descent.
pub const OMD_LR_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

pub const SOLVE_HEADER: &str = "iteration,cumulative_runtime_s,exploitability";
pub const REGRET_HEADER: &str = "episode,iteration,expl,expl_regret";
pub const AGGREGATE_HEADER: &str = "episode,iteration,expl_mean,expl_ci95,expl_regret_mean,expl_regret_ci95";
pub const LEADERBOARD_HEADER: &str = "env,algorithm,parameter,final_exploitability,iterations,iterations_to_1e-4,converged,csv";

#[derive(Debug, Parser)]
#[command(name = "mfoml", version, about = "Mean-field game solvers and online mean-field RL")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Solve an environment with one algorithm and write its exploitability curve.
    Solve(SolveArgs),
    /// Run online learning on the N-player game over several seeds.
    Learn(LearnArgs),
    /// Run a hyper-parameter grid over environments and algorithms.
    Benchmark(BenchmarkArgs),
    /// Print or write an environment config file.
    GenConfig(GenConfigArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    MfomiFbs,
    FictitiousPlay,
    Omd,
}

impl Algorithm {
    pub fn label(self) -> &'static str {
        match self {
            Algorithm::MfomiFbs => "mfomi-fbs",
            Algorithm::FictitiousPlay => "fictitious-play",
            Algorithm::Omd => "omd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Anchor {
    Iterate,
    GradientPoint,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SolveArgs {
    /// Built-in environment name or path to a TOML config.
    #[arg(long)]
    pub env: String,
    #[arg(long, value_enum, default_value = "mfomi-fbs")]
    pub algorithm: Algorithm,
    /// Step size of the splitting solver.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Regularization of the splitting solver.
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    /// Learning rate of online mirror descent.
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    /// Outer iteration budget.
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    /// Stop once exploitability is at most this value.
    #[arg(long, default_value_t = 1e-6)]
    pub stop_expl: f64,
    /// Where the kernel of mean-field dependent dynamics is anchored.
    #[arg(long, value_enum, default_value = "iterate")]
    pub anchor: Anchor,
    /// Output CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write zeros in the runtime column.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    Cubic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum History {
    Current,
    Cumulative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaChoice {
    Value(f64),
    /// `max(N^{-1/6}, M^{-1/12})`.
    Theory,
}

fn parse_eta(s: &str) -> Result<EtaChoice, String> {
    if s == "theory" {
        return Ok(EtaChoice::Theory);
    }
    s.parse::<f64>()
        .map(EtaChoice::Value)
        .map_err(|_| format!("expected a number or `theory`, got `{s}`"))
}

/// Seeds given on the command line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SeedList(pub Vec<u64>);

fn parse_seed_list(s: &str) -> Result<SeedList, String> {
    parse_seeds(s).map(SeedList)
}

/// `a..b` (exclusive), a comma list, or a single seed.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let bad = || format!("expected `a..b`, a comma list or a single integer, got `{s}`");
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if b <= a {
            return Err(format!("empty seed range `{s}`"));
        }
        return Ok((a..b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct LearnArgs {
    /// Built-in environment name or path to a TOML config.
    #[arg(long)]
    pub env: String,
    /// Number of agents in the N-player game.
    #[arg(long, default_value_t = 20)]
    pub n_players: usize,
    /// Step size of the approximate splitting solver.
    #[arg(long, default_value_t = 0.02)]
    pub alpha: f64,
    /// A number, or `theory` for `max(N^{-1/6}, M^{-1/12})`.
    #[arg(long, default_value = "0", value_parser = parse_eta)]
    pub eta: EtaChoice,
    /// Episodes per outer iteration for the constant schedule.
    #[arg(long, default_value_t = 20)]
    pub n_k: usize,
    /// Constant `n_k`, or `n_k` growing cubically in `k`.
    #[arg(long, value_enum, default_value = "constant")]
    pub schedule: ScheduleKind,
    /// Explicit per-iteration episode counts; overrides `--schedule`.
    #[arg(long, value_delimiter = ',')]
    pub n_k_list: Option<Vec<usize>>,
    /// Outer iterations `K`.
    #[arg(long, default_value_t = 50)]
    pub outer_iters: usize,
    /// Seeds as `a..b`, `1,2,3` or a single integer.
    #[arg(long, alias = "seed", default_value = "0..10", value_parser = parse_seed_list)]
    pub seeds: SeedList,
    /// Transition estimates from the current batch or from all batches.
    #[arg(long, value_enum, default_value = "current")]
    pub history: History,
    /// Also write the exploration batches as JSON lines.
    #[arg(long)]
    pub save_batches: bool,
    /// Skip the evaluation oracle; only batches are written.
    #[arg(long)]
    pub no_eval: bool,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct BenchmarkArgs {
    /// Environments (names or config paths).
    #[arg(long, value_delimiter = ',', default_value = "sis,building_evacuation,random_linear")]
    pub envs: Vec<String>,
    /// Algorithms to run.
    #[arg(long, value_delimiter = ',', value_enum, default_value = "mfomi-fbs,fictitious-play,omd")]
    pub algorithms: Vec<Algorithm>,
    /// Step sizes tried for the splitting solver.
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,1,10")]
    pub alphas: Vec<f64>,
    /// Learning rates tried for online mirror descent.
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,1,10,100")]
    pub lrs: Vec<f64>,
    /// Regularization of the splitting solver.
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    /// Outer iteration budget per run.
    #[arg(long, default_value_t = 1000)]
    pub iterations: usize,
    /// Stop a run once exploitability is at most this value.
    #[arg(long, default_value_t = 1e-6)]
    pub stop_expl: f64,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write zeros in the runtime columns.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GenConfigArgs {
    /// Built-in environment name.
    pub name: String,
    /// Override a parameter, e.g. `--set horizon=10` or `--set reward_noise=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Write to this path instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// `manifest.json` written by an earlier run.
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded location.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Solver(String),
    Io { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Solver(_) => EXIT_SOFTWARE,
            CliError::Io { .. } => EXIT_IO,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "invalid input: {m}"),
            CliError::Solver(m) => write!(f, "solver failure: {m}"),
            CliError::Io { path, message } => write!(f, "{}: {message}", path.display()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Record written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub artifact_version: String,
    pub invocation: Command,
    /// Environment config(s) used, as TOML, in the order of the invocation.
    pub env_configs: Vec<String>,
    pub seeds: Vec<u64>,
    pub outputs: Vec<PathBuf>,
    pub started_unix_s: f64,
    pub wall_clock_s: f64,
    pub exit_code: i32,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(&cli.command, None, None) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("mfoml: {e}");
            e.exit_code()
        }
    }
}

/// Runs `command`. `env_override` replaces the environments named in the
/// command (used by replay); `out_override` replaces the output location.
pub fn execute(command: &Command, env_override: Option<&[EnvConfig]>, out_override: Option<&Path>) -> Result<i32, CliError> {
    match command {
        Command::Solve(a) => cmd_solve(a, env_override, out_override),
        Command::Learn(a) => cmd_learn(a, env_override, out_override),
        Command::Benchmark(a) => cmd_benchmark(a, env_override, out_override),
        Command::GenConfig(a) => cmd_gen_config(a, out_override),
        Command::Replay(a) => cmd_replay(a),
    }
}

fn out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_VAR).map_or_else(|| PathBuf::from(DEFAULT_OUT_DIR), PathBuf::from)
}

/// Loads a config file, or the defaults of a built-in environment.
pub fn resolve_env(spec: &str) -> Result<EnvConfig, CliError> {
    let path = Path::new(spec);
    if path.is_file() {
        return load_env(path).map_err(|e| CliError::Data(e.to_string()));
    }
    let name = match spec.replace('-', "_").as_str() {
        "evacuation" => "building_evacuation".to_string(),
        n => n.to_string(),
    };
    EnvSpec::default_for(&name)
        .map(EnvConfig::new)
        .map_err(|_| CliError::Data(format!("unknown environment `{spec}`: not a file or a built-in name (sis, building_evacuation, random_linear)")))
}

fn build_model(config: &EnvConfig) -> Result<MfgModel, CliError> {
    config.build().map_err(|e| CliError::Data(e.to_string()))
}

fn envs_for(specs: &[String], env_override: Option<&[EnvConfig]>) -> Result<Vec<EnvConfig>, CliError> {
    match env_override {
        Some(c) if c.len() == specs.len() => Ok(c.to_vec()),
        Some(c) => Err(CliError::Data(format!("manifest holds {} environment configs, invocation names {}", c.len(), specs.len()))),
        None => specs.iter().map(|s| resolve_env(s)).collect(),
    }
}

/// Writes `bytes` to a temporary file in the target directory, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io_err(&dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    Ok(())
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Solve CSV: one row per iteration with a measured exploitability.
pub fn solve_csv(trace: &SolverTrace, timing: bool) -> String {
    let mut s = String::from(SOLVE_HEADER);
    s.push('\n');
    for r in &trace.records {
        if let Some(e) = r.exploitability {
            let rt = if timing { r.elapsed_s } else { 0.0 };
            let _ = writeln!(s, "{},{},{}", r.iteration, fmt_f64(rt), fmt_f64(e));
        }
    }
    s
}

pub fn regret_csv(trace: &RegretTrace) -> String {
    let mut s = String::from(REGRET_HEADER);
    s.push('\n');
    for r in &trace.records {
        let _ = writeln!(s, "{},{},{},{}", r.episode, r.iteration, fmt_f64(r.exploitability), fmt_f64(r.expl_regret));
    }
    s
}

fn manifest_path_for(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    output.with_file_name(format!("{stem}.manifest.json"))
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

struct ManifestDraft {
    invocation: Command,
    env_configs: Vec<String>,
    seeds: Vec<u64>,
    started_unix_s: f64,
    clock: Instant,
}

impl ManifestDraft {
    fn new(invocation: Command, configs: &[EnvConfig], seeds: Vec<u64>) -> Result<Self, CliError> {
        let env_configs = configs
            .iter()
            .map(|c| c.to_toml().map_err(|e| CliError::Data(e.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            invocation,
            env_configs,
            seeds,
            started_unix_s: unix_now(),
            clock: Instant::now(),
        })
    }

    fn write(self, path: &Path, outputs: Vec<PathBuf>, exit_code: i32) -> Result<(), CliError> {
        let m = RunManifest {
            manifest_version: MANIFEST_VERSION,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            invocation: self.invocation,
            env_configs: self.env_configs,
            seeds: self.seeds,
            outputs,
            started_unix_s: self.started_unix_s,
            wall_clock_s: self.clock.elapsed().as_secs_f64(),
            exit_code,
        };
        let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Data(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }
}

/// Hyper-parameters of one solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveSetup {
    pub algorithm: Algorithm,
    pub alpha: f64,
    pub eta: f64,
    pub lr: f64,
    pub iterations: usize,
    pub stop_expl: f64,
    pub anchor: Anchor,
}

/// Runs one algorithm with exploitability recorded at every iteration.
pub fn run_solver(model: &MfgModel, setup: &SolveSetup) -> Result<SolverTrace, CliError> {
    let solver_err = |e: crate::solver::SolverError| match e {
        crate::solver::SolverError::InvalidSchedule(m) => CliError::Usage(m),
        other => CliError::Solver(other.to_string()),
    };
    match setup.algorithm {
        Algorithm::MfomiFbs => {
            let d = model.dims();
            let schedule = SolverSchedule::new(setup.alpha, setup.eta, setup.iterations)
                .map_err(solver_err)?
                .with_stop(setup.stop_expl);
            let options = SolverOptions {
                exploitability_stride: 1,
                keep_iterates: false,
                anchor: match setup.anchor {
                    Anchor::Iterate => AnchorRule::Iterate,
                    Anchor::GradientPoint => AnchorRule::GradientPoint,
                },
                ..SolverOptions::default()
            };
            let start = uniform_policy(d.states, d.actions, d.horizon).map_err(|e| CliError::Data(e.to_string()))?;
            solve_mfomi_fbs(model, &schedule, &start, &options).map_err(solver_err)
        }
        Algorithm::FictitiousPlay | Algorithm::Omd => {
            let opts = BaselineOptions {
                exploitability_stride: 1,
                keep_iterates: false,
                stop_exploitability: Some(setup.stop_expl),
            };
            if setup.algorithm == Algorithm::FictitiousPlay {
                fictitious_play(model, setup.iterations, &opts).map_err(solver_err)
            } else {
                online_mirror_descent(model, setup.iterations, setup.lr, &opts).map_err(solver_err)
            }
        }
    }
}

fn exit_for(trace: &SolverTrace) -> i32 {
    match trace.termination {
        Termination::Converged => EXIT_CONVERGED,
        Termination::BudgetExhausted => EXIT_BUDGET,
    }
}

fn cmd_solve(a: &SolveArgs, env_override: Option<&[EnvConfig]>, out_override: Option<&Path>) -> Result<i32, CliError> {
    if !(a.stop_expl >= 0.0) {
        return Err(CliError::Usage("--stop-expl must be nonnegative".into()));
    }
    let config = envs_for(std::slice::from_ref(&a.env), env_override)?.remove(0);
    let draft = ManifestDraft::new(Command::Solve(a.clone()), std::slice::from_ref(&config), Vec::new())?;
    let model = build_model(&config)?;
    let setup = SolveSetup {
        algorithm: a.algorithm,
        alpha: a.alpha,
        eta: a.eta,
        lr: a.lr,
        iterations: a.iterations,
        stop_expl: a.stop_expl,
        anchor: a.anchor,
    };
    let trace = run_solver(&model, &setup)?;
    let out = out_override
        .map(Path::to_path_buf)
        .or_else(|| a.out.clone())
        .unwrap_or_else(|| out_dir().join(format!("solve_{}_{}.csv", config.environment.name(), a.algorithm.label())));
    write_atomic(&out, solve_csv(&trace, !a.no_timing).as_bytes())?;
    let code = exit_for(&trace);
    draft.write(&manifest_path_for(&out), vec![out.clone()], code)?;
    eprintln!(
        "{} on {}: {} iterations, exploitability {:.3e} -> {}",
        a.algorithm.label(),
        config.environment.name(),
        trace.last().iteration,
        trace.final_exploitability().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(code)
}

fn cmd_learn(a: &LearnArgs, env_override: Option<&[EnvConfig]>, out_override: Option<&Path>) -> Result<i32, CliError> {
    let config = envs_for(std::slice::from_ref(&a.env), env_override)?.remove(0);
    let seeds = &a.seeds.0;
    if seeds.is_empty() {
        return Err(CliError::Usage("at least one seed is required".into()));
    }
    let draft = ManifestDraft::new(Command::Learn(a.clone()), std::slice::from_ref(&config), seeds.clone())?;
    let model = build_model(&config)?;
    let schedule = match (&a.n_k_list, a.schedule) {
        (Some(list), _) => EpisodeSchedule::Custom(list.clone()),
        (None, ScheduleKind::Constant) => EpisodeSchedule::Constant(a.n_k),
        (None, ScheduleKind::Cubic) => EpisodeSchedule::Cubic,
    };
    let mut oml = OmlConfig {
        alpha: a.alpha,
        schedule,
        outer_iterations: a.outer_iters,
        transition_history: match a.history {
            History::Current => TransitionHistory::CurrentBatch,
            History::Cumulative => TransitionHistory::Cumulative,
        },
        evaluate: !a.no_eval,
        keep_batches: a.save_batches,
        ..OmlConfig::default()
    };
    oml.eta = match a.eta {
        EtaChoice::Value(v) => v,
        EtaChoice::Theory => OmlConfig::theory_eta(a.n_players, oml.total_episodes()),
    };
    oml.validate(model.dims()).map_err(|e| CliError::Usage(e.to_string()))?;
    if a.n_players == 0 {
        return Err(CliError::Usage("--n-players must be positive".into()));
    }
    let dir = out_override
        .map(Path::to_path_buf)
        .or_else(|| a.out.clone())
        .unwrap_or_else(|| out_dir().join(format!("learn_{}_N{}", config.environment.name(), a.n_players)));
    let runs = run_seeds(&model, a.n_players, config.reward_noise, &oml, seeds);
    let mut outputs = Vec::new();
    let mut traces = Vec::new();
    for (seed, run) in seeds.iter().zip(runs) {
        let run = run.map_err(|e| CliError::Solver(format!("seed {seed}: {e}")))?;
        if let Some(trace) = run.regret {
            let path = dir.join(format!("regret_seed{seed}.csv"));
            write_atomic(&path, regret_csv(&trace).as_bytes())?;
            outputs.push(path);
            traces.push(trace);
        }
        if a.save_batches {
            let path = dir.join(format!("batches_seed{seed}.jsonl"));
            let mut buf = Vec::new();
            write_batches_jsonl(&mut buf, &run.batches).map_err(|e| CliError::Data(e.to_string()))?;
            write_atomic(&path, &buf)?;
            outputs.push(path);
        }
    }
    if !traces.is_empty() {
        let agg = aggregate(&traces).map_err(|e| CliError::Solver(e.to_string()))?;
        let mut s = String::from(AGGREGATE_HEADER);
        s.push('\n');
        for r in &agg {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.episode,
                r.iteration,
                fmt_f64(r.expl_mean),
                fmt_f64(r.expl_half_width),
                fmt_f64(r.regret_mean),
                fmt_f64(r.regret_half_width)
            );
        }
        let path = dir.join("regret_aggregate.csv");
        write_atomic(&path, s.as_bytes())?;
        outputs.push(path);
        eprintln!(
            "learned {} seeds with N = {}: mean ExplRegret {:.4} after {} episodes -> {}",
            traces.len(),
            a.n_players,
            agg.last().map_or(0.0, |r| r.regret_mean),
            agg.len(),
            dir.display()
        );
    }
    draft.write(&dir.join("manifest.json"), outputs, EXIT_CONVERGED)?;
    Ok(EXIT_CONVERGED)
}

struct GridPoint {
    env: usize,
    setup: SolveSetup,
    label: String,
}

struct LeaderRow {
    env: String,
    algorithm: Algorithm,
    parameter: String,
    final_expl: f64,
    iterations: usize,
    to_1e4: Option<usize>,
    converged: bool,
    csv: String,
}

fn cmd_benchmark(a: &BenchmarkArgs, env_override: Option<&[EnvConfig]>, out_override: Option<&Path>) -> Result<i32, CliError> {
    if a.envs.is_empty() || a.algorithms.is_empty() {
        return Err(CliError::Usage("benchmark needs at least one environment and one algorithm".into()));
    }
    if (a.algorithms.contains(&Algorithm::MfomiFbs) && a.alphas.is_empty()) || (a.algorithms.contains(&Algorithm::Omd) && a.lrs.is_empty()) {
        return Err(CliError::Usage("empty hyper-parameter grid".into()));
    }
    let configs = envs_for(&a.envs, env_override)?;
    let draft = ManifestDraft::new(Command::Benchmark(a.clone()), &configs, Vec::new())?;
    let models: Vec<MfgModel> = configs.iter().map(build_model).collect::<Result<_, _>>()?;
    let names: Vec<String> = configs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            // Disambiguate repeated environment names.
            let n = c.environment.name();
            let dup = configs[..i].iter().filter(|o| o.environment.name() == n).count();
            if dup == 0 {
                n.to_string()
            } else {
                format!("{n}{}", dup + 1)
            }
        })
        .collect();
    let mut points = Vec::new();
    for env in 0..configs.len() {
        for &algorithm in &a.algorithms {
            let base = SolveSetup {
                algorithm,
                alpha: 1.0,
                eta: a.eta,
                lr: 1.0,
                iterations: a.iterations,
                stop_expl: a.stop_expl,
                anchor: Anchor::Iterate,
            };
            match algorithm {
                Algorithm::MfomiFbs => points.extend(a.alphas.iter().map(|&alpha| GridPoint {
                    env,
                    setup: SolveSetup { alpha, ..base },
                    label: format!("alpha={alpha}"),
                })),
                Algorithm::Omd => points.extend(a.lrs.iter().map(|&lr| GridPoint {
                    env,
                    setup: SolveSetup { lr, ..base },
                    label: format!("lr={lr}"),
                })),
                Algorithm::FictitiousPlay => points.push(GridPoint {
                    env,
                    setup: base,
                    label: "none".into(),
                }),
            }
        }
    }
    let dir = out_override
        .map(Path::to_path_buf)
        .or_else(|| a.out.clone())
        .unwrap_or_else(|| out_dir().join("benchmark"));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let results: Vec<Result<LeaderRow, CliError>> = pool.install(|| {
        points
            .par_iter()
            .map(|p| {
                let trace = run_solver(&models[p.env], &p.setup)?;
                let file = format!("{}__{}__{}.csv", names[p.env], p.setup.algorithm.label(), p.label);
                write_atomic(&dir.join(&file), solve_csv(&trace, !a.no_timing).as_bytes())?;
                Ok(LeaderRow {
                    env: names[p.env].clone(),
                    algorithm: p.setup.algorithm,
                    parameter: p.label.clone(),
                    final_expl: trace.final_exploitability().unwrap_or(f64::INFINITY),
                    iterations: trace.last().iteration,
                    to_1e4: trace.iterations_to(1e-4),
                    converged: trace.termination == Termination::Converged,
                    csv: file,
                })
            })
            .collect()
    });
    let mut outputs = Vec::new();
    let mut best: Vec<LeaderRow> = Vec::new();
    for r in results {
        let row = match r {
            Ok(row) => row,
            Err(CliError::Solver(m)) => {
                eprintln!("mfoml: grid point skipped: {m}");
                continue;
            }
            Err(e) => return Err(e),
        };
        outputs.push(dir.join(&row.csv));
        match best.iter_mut().find(|b| b.env == row.env && b.algorithm == row.algorithm) {
            Some(b) if leader_key(&row) < leader_key(b) => *b = row,
            Some(_) => {}
            None => best.push(row),
        }
    }
    best.sort_by(|x, y| {
        let ex = names.iter().position(|n| *n == x.env);
        let ey = names.iter().position(|n| *n == y.env);
        ex.cmp(&ey).then(leader_key(x).partial_cmp(&leader_key(y)).unwrap_or(std::cmp::Ordering::Equal))
    });
    let mut s = String::from(LEADERBOARD_HEADER);
    s.push('\n');
    for b in &best {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            b.env,
            b.algorithm.label(),
            b.parameter,
            fmt_f64(b.final_expl),
            b.iterations,
            b.to_1e4.map_or(String::new(), |k| k.to_string()),
            b.converged,
            b.csv
        );
    }
    let board = dir.join("leaderboard.csv");
    write_atomic(&board, s.as_bytes())?;
    outputs.push(board);
    let code = if !best.is_empty() && best.iter().all(|b| b.converged) {
        EXIT_CONVERGED
    } else {
        EXIT_BUDGET
    };
    draft.write(&dir.join("manifest.json"), outputs, code)?;
    eprint!("{s}");
    Ok(code)
}

/// Ranking inside one (env, algorithm) cell: lowest final exploitability,
/// then fewest iterations.
fn leader_key(r: &LeaderRow) -> (f64, usize) {
    (r.final_expl, r.iterations)
}

/// Default config of `name` with `KEY=VALUE` overrides applied and validated.
pub fn generate_config(name: &str, overrides: &[String]) -> Result<String, CliError> {
    let base = resolve_builtin(name)?;
    let text = base.to_toml().map_err(|e| CliError::Data(e.to_string()))?;
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Data(e.to_string()))?;
    for o in overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override `{o}` is not KEY=VALUE")))?;
        let key = key.trim();
        let value: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("key present"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        let target = if table.contains_key(key) && key != "environment" {
            &mut table
        } else {
            match table.get_mut("environment") {
                Some(toml::Value::Table(env)) if env.contains_key(key) && key != "name" => env,
                _ => return Err(CliError::Data(format!("unknown parameter `{key}` for environment `{name}`"))),
            }
        };
        target.insert(key.to_string(), value);
    }
    let edited = toml::to_string(&table).map_err(|e| CliError::Data(e.to_string()))?;
    let config = EnvConfig::from_toml(&edited).map_err(|e| CliError::Data(e.to_string()))?;
    config.build().map_err(|e| CliError::Data(e.to_string()))?;
    config.to_toml().map_err(|e| CliError::Data(e.to_string()))
}

fn resolve_builtin(name: &str) -> Result<EnvConfig, CliError> {
    if Path::new(name).is_file() {
        return Err(CliError::Usage(format!("gen-config takes an environment name, not a file (`{name}`)")));
    }
    resolve_env(name)
}

fn cmd_gen_config(a: &GenConfigArgs, out_override: Option<&Path>) -> Result<i32, CliError> {
    let text = generate_config(&a.name, &a.set)?;
    match out_override.map(Path::to_path_buf).or_else(|| a.out.clone()) {
        Some(path) => write_atomic(&path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(EXIT_CONVERGED)
}

fn cmd_replay(a: &ReplayArgs) -> Result<i32, CliError> {
    let text = std::fs::read_to_string(&a.manifest).map_err(io_err(&a.manifest))?;
    let m: RunManifest = serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", a.manifest.display())))?;
    if m.manifest_version != MANIFEST_VERSION {
        return Err(CliError::Data(format!("unsupported manifest version {}", m.manifest_version)));
    }
    if matches!(m.invocation, Command::Replay(_)) {
        return Err(CliError::Data("manifest records a replay".into()));
    }
    let configs: Vec<EnvConfig> = m
        .env_configs
        .iter()
        .map(|t| EnvConfig::from_toml(t).map_err(|e| CliError::Data(e.to_string())))
        .collect::<Result<_, _>>()?;
    execute(&m.invocation, Some(&configs), a.out.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists_parse() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("4, 9").unwrap(), vec![4, 9]);
        assert_eq!(parse_seeds("7").unwrap(), vec![7]);
        assert!(parse_seeds("3..3").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn eta_accepts_numbers_and_the_preset() {
        assert_eq!(parse_eta("0.5").unwrap(), EtaChoice::Value(0.5));
        assert_eq!(parse_eta("theory").unwrap(), EtaChoice::Theory);
        assert!(parse_eta("big").is_err());
    }

    #[test]
    fn floats_keep_seventeen_significant_digits() {
        let x = 0.1f64 + 0.2;
        let s = fmt_f64(x);
        assert_eq!(s.parse::<f64>().unwrap(), x);
        assert_eq!(s, "3.0000000000000004e-1");
    }

    #[test]
    fn manifest_sits_next_to_its_output() {
        assert_eq!(manifest_path_for(Path::new("a/b/run.csv")), PathBuf::from("a/b/run.manifest.json"));
    }

    #[test]
    fn env_names_resolve() {
        assert_eq!(resolve_env("building-evacuation").unwrap().environment.name(), "building_evacuation");
        assert_eq!(resolve_env("evacuation").unwrap().environment.name(), "building_evacuation");
        assert!(matches!(resolve_env("nope"), Err(CliError::Data(_))));
    }

    #[test]
    fn overrides_are_validated_by_name() {
        let text = generate_config("random-linear", &["seed=7".into()]).unwrap();
        assert!(text.contains("seed = 7"));
        let err = generate_config("sis", &["horizon=0".into()]).unwrap_err().to_string();
        assert!(err.contains("horizon"), "{err}");
        let err = generate_config("sis", &["gamma=1".into()]).unwrap_err().to_string();
        assert!(err.contains("gamma"), "{err}");
        let err = generate_config("sis", &["beta=2.5".into()]).unwrap_err().to_string();
        assert!(err.contains("beta"), "{err}");
        assert!(generate_config("sis", &["reward_noise=0.1".into()]).unwrap().contains("reward_noise = 0.1"));
    }
}
