//! Tabular finite-horizon mean-field games: occupation-measure solvers,
//! exploitability evaluation, baselines and an online learner for N-player games.

pub mod baselines;
pub mod cli;
pub mod dynamics;
pub mod envs;
pub mod evaluation;
pub mod model;
pub mod nplayer;
pub mod oml;
pub mod projection;
pub mod random;
pub mod solver;
pub mod sparse;
