//! C ABI over the grounding toolkit.
//!
//! Conventions:
//! - every fallible function returns a [`GaratStatus`]; `GARAT_STATUS_OK` is 0;
//! - results come back through out-pointers, never through the return value;
//! - objects are opaque handles created by `garat_*_new`/`*_from_json` and
//!   released by the matching `garat_*_free` (passing NULL is a no-op);
//! - after a failure, `garat_last_error_message` describes it (per thread);
//! - strings returned by the library are freed with `garat_string_free`;
//! - dense tensors are row-major `[s][a][s']` arrays of `double`.
//!
//! Panics never cross the boundary: they are reported as `GARAT_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use garat::envs::{make_pair, rng_from_seed, Environment, PairConfig, SimRng};
use garat::grounding::{ActionTransformer, GroundedEnvironment};
use garat::mdp::{
    expected_return_from_marginal, marginal_transition_distribution, policy_evaluation,
    start_value, TabularMdp, TabularPolicy, Tensor3,
};
use garat::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GaratStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    InvalidDistribution = 4,
    NonFinite = 5,
    TooLarge = 6,
    BufferTooSmall = 7,
    Parse = 8,
    Io = 9,
    Internal = 10,
    Panic = 11,
}

/// A finite MDP with explicit transition and reward tensors.
pub struct GaratMdp {
    mdp: TabularMdp,
}

/// A steppable environment (simulator, real, or grounded simulator) with its
/// own random stream.
pub struct GaratEnv {
    env: Box<dyn Environment>,
    rng: SimRng,
}

/// A learned action transformer.
pub struct GaratTransformer {
    transformer: ActionTransformer,
    rng: SimRng,
}

/// Which side of an environment pair to instantiate.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GaratSide {
    Sim = 0,
    Real = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(GaratStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Dimension(_) => GaratStatus::Dimension,
            Error::InvalidDistribution(_) => GaratStatus::InvalidDistribution,
            Error::InvalidParameter(_)
            | Error::Empty(_)
            | Error::OutOfBounds(_)
            | Error::DegenerateAnchors { .. }
            | Error::BudgetExhausted(_)
            | Error::Unknown(_) => GaratStatus::InvalidArgument,
            Error::NonFinite(_) => GaratStatus::NonFinite,
            Error::TooLarge(_) => GaratStatus::TooLarge,
            Error::Json(_) | Error::Csv(_) | Error::Toml(_) => GaratStatus::Parse,
            Error::Io(_) => GaratStatus::Io,
            Error::NoForwardPass | Error::Internal(_) => GaratStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: GaratStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

/// Runs `f`, converting errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GaratStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_last_error();
            GaratStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("panic: {msg}"));
            GaratStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        fail(GaratStatus::NullPointer, format!("{what} is NULL"))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be NULL or point to `len` readable doubles.
unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be NULL or point to `len` writable doubles.
unsafe fn write_out(p: *mut f64, len: usize, values: &[f64], what: &str) -> Result<(), Failure> {
    if len < values.len() {
        return fail(
            GaratStatus::BufferTooSmall,
            format!("{what}: need {} doubles, got {len}", values.len()),
        );
    }
    if !values.is_empty() {
        non_null(p, what)?;
        ptr::copy_nonoverlapping(values.as_ptr(), p, values.len());
    }
    Ok(())
}

/// # Safety
/// `p` must be NULL or a NUL-terminated string.
unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(GaratStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn tensor3(flat: &[f64], n: usize, m: usize, k: usize) -> Tensor3 {
    flat.chunks(m * k)
        .take(n)
        .map(|sa| sa.chunks(k).map(|row| row.to_vec()).collect())
        .collect()
}

fn policy_from_flat(
    flat: &[f64],
    n_states: usize,
    n_actions: usize,
) -> Result<TabularPolicy, Failure> {
    Ok(TabularPolicy::new(
        flat.chunks(n_actions)
            .take(n_states)
            .map(|r| r.to_vec())
            .collect(),
    )?)
}

fn to_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(GaratStatus::Internal, "string contains NUL".into()))
}

/// Message describing the most recent failure on this thread, or NULL.
/// The pointer stays valid until the next call into the library on this
/// thread; do not free it.
#[no_mangle]
pub extern "C" fn garat_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn garat_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by the library.
///
/// # Safety
/// `s` must be NULL or a pointer returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn garat_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds an MDP from dense tensors: `transition` and `reward` hold
/// `n_states * n_actions * n_states` doubles, `rho0` holds `n_states`.
///
/// # Safety
/// Pointers must reference arrays of the stated sizes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn garat_mdp_new(
    n_states: usize,
    n_actions: usize,
    transition: *const f64,
    reward: *const f64,
    rho0: *const f64,
    gamma: f64,
    out: *mut *mut GaratMdp,
) -> GaratStatus {
    guard(|| {
        non_null(out, "out")?;
        if n_states == 0 || n_actions == 0 {
            return fail(GaratStatus::InvalidArgument, "empty state or action set");
        }
        let len = n_states
            .checked_mul(n_actions)
            .and_then(|x| x.checked_mul(n_states))
            .ok_or_else(|| Failure(GaratStatus::TooLarge, "tensor size overflows".into()))?;
        let t = tensor3(
            slice(transition, len, "transition")?,
            n_states,
            n_actions,
            n_states,
        );
        let r = tensor3(slice(reward, len, "reward")?, n_states, n_actions, n_states);
        let rho0 = slice(rho0, n_states, "rho0")?.to_vec();
        let mdp = TabularMdp::new(t, r, gamma, rho0)?;
        *out = Box::into_raw(Box::new(GaratMdp { mdp }));
        Ok(())
    })
}

/// Parses an MDP from its JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn garat_mdp_from_json(
    json: *const c_char,
    out: *mut *mut GaratMdp,
) -> GaratStatus {
    guard(|| {
        non_null(out, "out")?;
        let mdp = TabularMdp::from_json(string(json, "json")?)?;
        *out = Box::into_raw(Box::new(GaratMdp { mdp }));
        Ok(())
    })
}

/// Serializes an MDP to JSON; free the result with `garat_string_free`.
///
/// # Safety
/// `mdp` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn garat_mdp_to_json(
    mdp: *const GaratMdp,
    out: *mut *mut c_char,
) -> GaratStatus {
    guard(|| {
        non_null(mdp, "mdp")?;
        non_null(out, "out")?;
        *out = to_c_string((*mdp).mdp.to_json()?)?;
        Ok(())
    })
}

/// # Safety
/// `mdp` must be NULL or a live handle, which is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn garat_mdp_free(mdp: *mut GaratMdp) {
    if !mdp.is_null() {
        drop(Box::from_raw(mdp));
    }
}

/// Writes the number of states and actions.
///
/// # Safety
/// `mdp` must be a live handle; out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn garat_mdp_shape(
    mdp: *const GaratMdp,
    n_states: *mut usize,
    n_actions: *mut usize,
) -> GaratStatus {
    guard(|| {
        non_null(mdp, "mdp")?;
        non_null(n_states, "n_states")?;
        non_null(n_actions, "n_actions")?;
        *n_states = (*mdp).mdp.n_states();
        *n_actions = (*mdp).mdp.n_actions();
        Ok(())
    })
}

/// Exact marginal transition distribution of a policy (`n_states * n_actions`
/// probabilities, row-major) written into `out_rho` (`n_states * n_actions *
/// n_states` doubles).
///
/// # Safety
/// `mdp` must be a live handle; arrays must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn garat_mdp_marginal(
    mdp: *const GaratMdp,
    policy: *const f64,
    policy_len: usize,
    out_rho: *mut f64,
    out_len: usize,
) -> GaratStatus {
    guard(|| {
        non_null(mdp, "mdp")?;
        let m = &(*mdp).mdp;
        let (n, k) = (m.n_states(), m.n_actions());
        if policy_len != n * k {
            return fail(
                GaratStatus::Dimension,
                format!("policy has {policy_len} entries, expected {}", n * k),
            );
        }
        let pi = policy_from_flat(slice(policy, policy_len, "policy")?, n, k)?;
        let rho = marginal_transition_distribution(m, &pi)?;
        write_out(out_rho, out_len, &rho.flat(), "out_rho")
    })
}

/// Expected discounted return of a policy, computed two ways: by exact policy
/// evaluation (`out_value`) and through the marginal (`out_from_marginal`).
/// Either out-pointer may be NULL.
///
/// # Safety
/// `mdp` must be a live handle; `policy` must hold `policy_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn garat_mdp_policy_return(
    mdp: *const GaratMdp,
    policy: *const f64,
    policy_len: usize,
    out_value: *mut f64,
    out_from_marginal: *mut f64,
) -> GaratStatus {
    guard(|| {
        non_null(mdp, "mdp")?;
        let m = &(*mdp).mdp;
        let (n, k) = (m.n_states(), m.n_actions());
        if policy_len != n * k {
            return fail(
                GaratStatus::Dimension,
                format!("policy has {policy_len} entries, expected {}", n * k),
            );
        }
        let pi = policy_from_flat(slice(policy, policy_len, "policy")?, n, k)?;
        if !out_value.is_null() {
            *out_value = start_value(m, &policy_evaluation(m, &pi)?);
        }
        if !out_from_marginal.is_null() {
            let rho = marginal_transition_distribution(m, &pi)?;
            *out_from_marginal = expected_return_from_marginal(&rho, m.reward(), m.gamma())?;
        }
        Ok(())
    })
}

/// Instantiates one side of an environment pair. `pair_json` is a pair
/// description (`{"env":"pendulum","property":"mass","default":4.89,
/// "modified":100.0}`) or NULL for the default pendulum pair.
///
/// # Safety
/// `pair_json` must be NULL or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn garat_env_new(
    pair_json: *const c_char,
    side: GaratSide,
    seed: u64,
    out: *mut *mut GaratEnv,
) -> GaratStatus {
    guard(|| {
        non_null(out, "out")?;
        let config = if pair_json.is_null() {
            PairConfig::pendulum_default()
        } else {
            serde_json::from_str(string(pair_json, "pair_json")?).map_err(Error::from)?
        };
        let pair = make_pair(&config)?;
        let env = match side {
            GaratSide::Sim => pair.sim,
            GaratSide::Real => pair.real,
        };
        *out = Box::into_raw(Box::new(GaratEnv {
            env,
            rng: rng_from_seed(seed),
        }));
        Ok(())
    })
}

/// Wraps a copy of `sim` with a transformer, deploying its mean action.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn garat_env_grounded(
    sim: *const GaratEnv,
    transformer: *const GaratTransformer,
    seed: u64,
    out: *mut *mut GaratEnv,
) -> GaratStatus {
    guard(|| {
        non_null(sim, "sim")?;
        non_null(transformer, "transformer")?;
        non_null(out, "out")?;
        let g = GroundedEnvironment::new(
            (*sim).env.clone(),
            (*transformer).transformer.clone(),
            false,
        )?;
        *out = Box::into_raw(Box::new(GaratEnv {
            env: Box::new(g),
            rng: rng_from_seed(seed),
        }));
        Ok(())
    })
}

/// # Safety
/// `env` must be NULL or a live handle, which is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn garat_env_free(env: *mut GaratEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Observation dimension, action dimension and horizon.
///
/// # Safety
/// `env` must be a live handle; out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn garat_env_dims(
    env: *const GaratEnv,
    obs_dim: *mut usize,
    action_dim: *mut usize,
    horizon: *mut usize,
) -> GaratStatus {
    guard(|| {
        non_null(env, "env")?;
        non_null(obs_dim, "obs_dim")?;
        non_null(action_dim, "action_dim")?;
        non_null(horizon, "horizon")?;
        let spec = (*env).env.spec();
        *obs_dim = spec.observation.dim();
        *action_dim = spec.action.dim();
        *horizon = spec.horizon;
        Ok(())
    })
}

/// Draws a start state and writes it to `out_state`.
///
/// # Safety
/// `env` must be a live handle; `out_state` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn garat_env_reset(
    env: *mut GaratEnv,
    out_state: *mut f64,
    out_len: usize,
) -> GaratStatus {
    guard(|| {
        non_null(env, "env")?;
        let e = &mut *env;
        let s = e.env.reset(&mut e.rng);
        write_out(out_state, out_len, &s, "out_state")
    })
}

/// Makes `state` the current state.
///
/// # Safety
/// `env` must be a live handle; `state` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn garat_env_set_state(
    env: *mut GaratEnv,
    state: *const f64,
    len: usize,
) -> GaratStatus {
    guard(|| {
        non_null(env, "env")?;
        let e = &mut *env;
        let dim = e.env.spec().observation.dim();
        if len != dim {
            return fail(
                GaratStatus::Dimension,
                format!("state has {len} entries, expected {dim}"),
            );
        }
        e.env.set_state(slice(state, len, "state")?)?;
        Ok(())
    })
}

/// Advances one step. Writes the next state, the reward and whether the
/// episode terminated.
///
/// # Safety
/// `env` must be a live handle; arrays must have the stated lengths;
/// `reward` and `done` must be writable.
#[no_mangle]
pub unsafe extern "C" fn garat_env_step(
    env: *mut GaratEnv,
    action: *const f64,
    action_len: usize,
    out_next_state: *mut f64,
    out_len: usize,
    reward: *mut f64,
    done: *mut bool,
) -> GaratStatus {
    guard(|| {
        non_null(env, "env")?;
        non_null(reward, "reward")?;
        non_null(done, "done")?;
        let e = &mut *env;
        let dim = e.env.spec().action.dim();
        if action_len != dim {
            return fail(
                GaratStatus::Dimension,
                format!("action has {action_len} entries, expected {dim}"),
            );
        }
        let a = slice(action, action_len, "action")?;
        if a.iter().any(|x| !x.is_finite()) {
            return fail(GaratStatus::NonFinite, "action");
        }
        let obs_dim = e.env.spec().observation.dim();
        if out_len < obs_dim {
            return fail(
                GaratStatus::BufferTooSmall,
                format!("out_next_state: need {obs_dim} doubles, got {out_len}"),
            );
        }
        let step = e.env.step(a, &mut e.rng);
        write_out(out_next_state, out_len, &step.next_state, "out_next_state")?;
        *reward = step.reward;
        *done = step.done;
        Ok(())
    })
}

/// Parses a transformer checkpoint (as written by the `ground` command).
///
/// # Safety
/// `json` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn garat_transformer_from_json(
    json: *const c_char,
    seed: u64,
    out: *mut *mut GaratTransformer,
) -> GaratStatus {
    guard(|| {
        non_null(out, "out")?;
        let transformer = ActionTransformer::from_json(string(json, "json")?)?;
        *out = Box::into_raw(Box::new(GaratTransformer {
            transformer,
            rng: rng_from_seed(seed),
        }));
        Ok(())
    })
}

/// # Safety
/// `t` must be NULL or a live handle, which is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn garat_transformer_free(t: *mut GaratTransformer) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Deployed (mean or most likely) transformed action for `(state, action)`.
///
/// # Safety
/// `t` must be a live handle; arrays must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn garat_transformer_deploy(
    t: *mut GaratTransformer,
    state: *const f64,
    state_len: usize,
    action: *const f64,
    action_len: usize,
    out_action: *mut f64,
    out_len: usize,
) -> GaratStatus {
    guard(|| {
        non_null(t, "transformer")?;
        let t = &mut *t;
        let s = slice(state, state_len, "state")?;
        let a = slice(action, action_len, "action")?;
        let out = t.transformer.deploy(s, a, &mut t.rng)?;
        write_out(out_action, out_len, &out, "out_action")
    })
}

/// Runs a verification suite (`marginals`, `propositions`, `theorem1`,
/// `gradients`, `grounding_error`) and returns its JSON report in `out_json`
/// (free with `garat_string_free`) and whether it passed in `passed`.
///
/// # Safety
/// `suite` must be NUL-terminated; out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn garat_verify(
    suite: *const c_char,
    passed: *mut bool,
    out_json: *mut *mut c_char,
) -> GaratStatus {
    guard(|| {
        non_null(passed, "passed")?;
        non_null(out_json, "out_json")?;
        let report = garat::harness::verify(string(suite, "suite")?)?;
        *passed = report.passed;
        *out_json = to_c_string(serde_json::to_string(&report).map_err(Error::from)?)?;
        Ok(())
    })
}
