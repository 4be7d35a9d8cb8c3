//! C ABI over the `mfoml` solver.
//!
//! Models and solutions are opaque heap handles released with their `_free`
//! function. Every fallible call returns an [`MfomlStatus`]; on failure the
//! message is available from [`mfoml_last_error`] on the same thread. Panics
//! never cross the boundary and surface as [`MfomlStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mfoml::envs::{EnvConfig, EnvSpec};
use mfoml::evaluation::exploitability;
use mfoml::model::{uniform_policy, MfgModel, Policy};
use mfoml::solver::{solve_mfomi_fbs, SolverError, SolverOptions, SolverSchedule, SolverTrace, Termination};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MfomlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    /// A numerical routine gave up; the message names which one.
    SolverFailure = 4,
    /// The caller's buffer is smaller than the reported length.
    BufferTooSmall = 5,
    Internal = 6,
}

/// Opaque model handle.
pub struct MfomlModel {
    model: MfgModel,
}

/// Opaque handle holding the last iterate of a solver run.
pub struct MfomlSolution {
    trace: SolverTrace,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let text = message.into().replace('\0', " ");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::new(text).ok());
}

struct Failure(MfomlStatus, String);

impl From<SolverError> for Failure {
    fn from(e: SolverError) -> Self {
        let status = match e {
            SolverError::InvalidSchedule(_) | SolverError::MissingEpsilon => MfomlStatus::InvalidArgument,
            SolverError::Model(_) => MfomlStatus::InvalidConfig,
            _ => MfomlStatus::SolverFailure,
        };
        Failure(status, e.to_string())
    }
}

/// Runs `body`, records any failure and maps it to a status.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> MfomlStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            MfomlStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {message}"));
            MfomlStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MfomlStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MfomlStatus::InvalidArgument, format!("`{what}` is not valid UTF-8")))
}

unsafe fn model_ref<'a>(p: *const MfomlModel) -> Result<&'a MfgModel, Failure> {
    p.as_ref().map(|m| &m.model).ok_or_else(|| null("model"))
}

unsafe fn solution_ref<'a>(p: *const MfomlSolution) -> Result<&'a SolverTrace, Failure> {
    p.as_ref().map(|s| &s.trace).ok_or_else(|| null("solution"))
}

/// Copies `values` into `out` if it fits; always reports the needed length.
unsafe fn copy_out(values: &[f64], out: *mut f64, capacity: usize, len_out: *mut usize) -> Result<(), Failure> {
    if !len_out.is_null() {
        *len_out = values.len();
    }
    if out.is_null() {
        return if capacity == 0 { Ok(()) } else { Err(null("out")) };
    }
    if capacity < values.len() {
        return Err(Failure(
            MfomlStatus::BufferTooSmall,
            format!("buffer holds {capacity} values, {} needed", values.len()),
        ));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

fn config_error(e: impl ToString) -> Failure {
    Failure(MfomlStatus::InvalidConfig, e.to_string())
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call into this library.
#[no_mangle]
pub extern "C" fn mfoml_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mfoml_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a built-in environment with default parameters
/// (`sis`, `building_evacuation` or `random_linear`).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mfoml_model_from_env(name: *const c_char, out: *mut *mut MfomlModel) -> MfomlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let name = read_str(name, "name")?;
        let model = EnvSpec::default_for(name).and_then(|s| s.build()).map_err(config_error)?;
        *out = Box::into_raw(Box::new(MfomlModel { model }));
        Ok(())
    })
}

/// Builds a model from the text of a TOML environment config.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mfoml_model_from_toml(toml: *const c_char, out: *mut *mut MfomlModel) -> MfomlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = read_str(toml, "toml")?;
        let model = EnvConfig::from_toml(text).and_then(|c| c.build()).map_err(config_error)?;
        *out = Box::into_raw(Box::new(MfomlModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from a constructor above and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mfoml_model_free(model: *mut MfomlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the state count, action count and horizon.
///
/// # Safety
/// `model` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mfoml_model_dims(
    model: *const MfomlModel,
    states: *mut usize,
    actions: *mut usize,
    horizon: *mut usize,
) -> MfomlStatus {
    guard(|| {
        let d = model_ref(model)?.dims();
        if states.is_null() || actions.is_null() || horizon.is_null() {
            return Err(null("dims output"));
        }
        (*states, *actions, *horizon) = (d.states, d.actions, d.horizon);
        Ok(())
    })
}

/// Exploitability of a policy given as `T * S * A` probabilities in flow
/// layout (`t*S*A + a*S + s`).
///
/// # Safety
/// `model` must be a live handle and `policy` must point to `len` values.
#[no_mangle]
pub unsafe extern "C" fn mfoml_exploitability(
    model: *const MfomlModel,
    policy: *const f64,
    len: usize,
    out: *mut f64,
) -> MfomlStatus {
    guard(|| {
        let model = model_ref(model)?;
        if policy.is_null() {
            return Err(null("policy"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let values = std::slice::from_raw_parts(policy, len).to_vec();
        let policy = Policy::from_vec(model.dims(), values)
            .map_err(|e| Failure(MfomlStatus::InvalidArgument, e.to_string()))?;
        *out = exploitability(model, &policy).map_err(config_error)?;
        Ok(())
    })
}

/// Runs forward-backward splitting from the uniform policy. `stop` is an
/// exploitability threshold for early exit; pass a negative value to run the
/// full budget.
///
/// # Safety
/// `model` must be a live handle and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mfoml_solve_fbs(
    model: *const MfomlModel,
    alpha: f64,
    eta: f64,
    max_iterations: usize,
    stop: f64,
    out: *mut *mut MfomlSolution,
) -> MfomlStatus {
    guard(|| {
        let model = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut schedule = SolverSchedule::new(alpha, eta, max_iterations)?;
        if stop >= 0.0 {
            schedule = schedule.with_stop(stop);
        }
        let d = model.dims();
        let init = uniform_policy(d.states, d.actions, d.horizon).map_err(config_error)?;
        let options = SolverOptions {
            exploitability_stride: if stop >= 0.0 { 1 } else { 0 },
            keep_iterates: false,
            ..SolverOptions::default()
        };
        let trace = solve_mfomi_fbs(model, &schedule, &init, &options)?;
        *out = Box::into_raw(Box::new(MfomlSolution { trace }));
        Ok(())
    })
}

/// # Safety
/// `solution` must come from [`mfoml_solve_fbs`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mfoml_solution_free(solution: *mut MfomlSolution) {
    if !solution.is_null() {
        drop(Box::from_raw(solution));
    }
}

/// Iterations run, whether the stop threshold was met, and the final
/// exploitability.
///
/// # Safety
/// `solution` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mfoml_solution_summary(
    solution: *const MfomlSolution,
    iterations: *mut usize,
    converged: *mut bool,
    exploitability: *mut f64,
) -> MfomlStatus {
    guard(|| {
        let trace = solution_ref(solution)?;
        if iterations.is_null() || converged.is_null() || exploitability.is_null() {
            return Err(null("summary output"));
        }
        *iterations = trace.last().iteration;
        *converged = trace.termination == Termination::Converged;
        *exploitability = trace.final_exploitability().unwrap_or(f64::NAN);
        Ok(())
    })
}

/// Copies the final policy into `out` (flow layout). Pass a null `out` with
/// zero `capacity` to query the length only.
///
/// # Safety
/// `out` must hold `capacity` values; `len` may be null.
#[no_mangle]
pub unsafe extern "C" fn mfoml_solution_policy(
    solution: *const MfomlSolution,
    out: *mut f64,
    capacity: usize,
    len: *mut usize,
) -> MfomlStatus {
    guard(|| copy_out(solution_ref(solution)?.final_policy().as_slice(), out, capacity, len))
}

/// Copies the final occupation measure into `out`, same contract as
/// [`mfoml_solution_policy`].
///
/// # Safety
/// `out` must hold `capacity` values; `len` may be null.
#[no_mangle]
pub unsafe extern "C" fn mfoml_solution_flow(
    solution: *const MfomlSolution,
    out: *mut f64,
    capacity: usize,
    len: *mut usize,
) -> MfomlStatus {
    guard(|| copy_out(solution_ref(solution)?.final_flow().as_slice(), out, capacity, len))
}
