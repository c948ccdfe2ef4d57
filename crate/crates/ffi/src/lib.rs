//! C ABI for the `eftd` library.
//!
//! Environments and agents are opaque handles created and released through
//! this interface. Every function returns an [`EftdStatus`]; on failure the
//! message is kept per thread and can be read with
//! [`eftd_last_error_message`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;
use std::sync::Arc;

use eftd::analysis::verify_all_lemmas;
use eftd::compression::{Compressor, CompressorSpec};
use eftd::ef_td::{ef_step_with_direction, AgentState, ProjectionSpec, Scratch};
use eftd::env_model::{td_direction_into, Environment, IidSampler, MarkovSampler, PreparedEnvironment, RandomMrpParams, TupleSampler};
use eftd::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EftdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Numerical = 4,
    Io = 5,
    VerificationFailed = 6,
    Panic = 7,
}

/// Observation model for [`eftd_agent_new`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EftdSampler {
    MeanPath = 0,
    Iid = 1,
    Markov = 2,
}

/// Environment with its ground truth.
pub struct EftdEnv {
    prepared: Arc<PreparedEnvironment>,
}

enum Source {
    MeanPath,
    Iid(IidSampler),
    Markov(MarkovSampler),
}

/// A single EF-TD learner bound to an environment.
pub struct EftdAgent {
    env: Arc<PreparedEnvironment>,
    state: AgentState,
    compressor: Compressor,
    scratch: Scratch,
    source: Source,
    alpha: f64,
    projection: ProjectionSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> EftdStatus {
    match err {
        Error::DimensionMismatch { .. } => EftdStatus::DimensionMismatch,
        Error::NonConvergence { .. } | Error::SingularMatrix | Error::MixingCapExceeded { .. } | Error::Diverged => {
            EftdStatus::Numerical
        }
        Error::Io(_) => EftdStatus::Io,
        _ => EftdStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (EftdStatus, String)>) -> EftdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            EftdStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            EftdStatus::Panic
        }
    }
}

fn lift<T>(r: eftd::Result<T>) -> Result<T, (EftdStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (EftdStatus, String) {
    (EftdStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (EftdStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (EftdStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn copy_out(src: &[f64], out: *mut f64, len: usize) -> Result<(), (EftdStatus, String)> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if len != src.len() {
        return Err((EftdStatus::DimensionMismatch, format!("buffer has {len} entries, expected {}", src.len())));
    }
    slice::from_raw_parts_mut(out, len).copy_from_slice(src);
    Ok(())
}

/// Copies the last error message of this thread into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
#[no_mangle]
pub unsafe extern "C" fn eftd_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Generates a random environment with rewards in `[0, 1]`.
#[no_mangle]
pub unsafe extern "C" fn eftd_env_generate(n: usize, k: usize, gamma: f64, seed: u64, out: *mut *mut EftdEnv) -> EftdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let params = RandomMrpParams::new(n, k, gamma, seed);
        lift(params.validate())?;
        let prepared = lift(Environment::generate(&params).and_then(PreparedEnvironment::new))?;
        *out = Box::into_raw(Box::new(EftdEnv { prepared: Arc::new(prepared) }));
        Ok(())
    })
}

/// Loads an environment JSON document.
#[no_mangle]
pub unsafe extern "C" fn eftd_env_load_json(path: *const c_char, out: *mut *mut EftdEnv) -> EftdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = c_str(path, "path")?;
        let text = std::fs::read_to_string(path).map_err(|e| (EftdStatus::Io, e.to_string()))?;
        let prepared = lift(Environment::from_json(&text).and_then(PreparedEnvironment::new))?;
        *out = Box::into_raw(Box::new(EftdEnv { prepared: Arc::new(prepared) }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn eftd_env_free(env: *mut EftdEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Feature dimension `K`.
#[no_mangle]
pub unsafe extern "C" fn eftd_env_dim(env: *const EftdEnv, out: *mut usize) -> EftdStatus {
    guard(|| {
        let env = env.as_ref().ok_or_else(|| null("env"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = env.prepared.k();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn eftd_env_theta_star(env: *const EftdEnv, out: *mut f64, len: usize) -> EftdStatus {
    guard(|| {
        let env = env.as_ref().ok_or_else(|| null("env"))?;
        copy_out(env.prepared.steady.theta_star_slice(), out, len)
    })
}

/// Smallest eigenvalue of `ΦᵀDΦ`.
#[no_mangle]
pub unsafe extern "C" fn eftd_env_omega(env: *const EftdEnv, out: *mut f64) -> EftdStatus {
    guard(|| {
        let env = env.as_ref().ok_or_else(|| null("env"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = env.prepared.steady.omega;
        Ok(())
    })
}

/// `E_π‖g(X, θ*)‖²`.
#[no_mangle]
pub unsafe extern "C" fn eftd_env_sigma_sq(env: *const EftdEnv, out: *mut f64) -> EftdStatus {
    guard(|| {
        let env = env.as_ref().ok_or_else(|| null("env"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = env.prepared.steady.sigma_sq;
        Ok(())
    })
}

/// Runs the lemma suite; `all_pass` receives 1 or 0. Returns
/// `VERIFICATION_FAILED` when any check fails.
#[no_mangle]
pub unsafe extern "C" fn eftd_env_verify(env: *const EftdEnv, trials: usize, seed: u64, all_pass: *mut i32) -> EftdStatus {
    guard(|| {
        let env = env.as_ref().ok_or_else(|| null("env"))?;
        let out = all_pass.as_mut().ok_or_else(|| null("all_pass"))?;
        let report = verify_all_lemmas(&env.prepared, trials, seed);
        *out = i32::from(report.all_pass());
        if report.all_pass() {
            Ok(())
        } else {
            Err((EftdStatus::VerificationFailed, report.table()))
        }
    })
}

/// Creates an EF-TD agent at `θ₀ = 0`.
///
/// `compressor` is `identity`, `topk:k`, `signscaled`, `signraw` or
/// `randk:k`. A positive `projection_radius` enables projection onto that
/// ball.
#[no_mangle]
pub unsafe extern "C" fn eftd_agent_new(
    env: *const EftdEnv,
    compressor: *const c_char,
    alpha: f64,
    sampler: EftdSampler,
    projection_radius: f64,
    seed: u64,
    out: *mut *mut EftdAgent,
) -> EftdStatus {
    guard(|| {
        let env = env.as_ref().ok_or_else(|| null("env"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let text = c_str(compressor, "compressor")?;
        let k = env.prepared.k();
        let spec = lift(CompressorSpec::parse(text, k))?;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err((EftdStatus::InvalidArgument, format!("alpha must lie in (0,1), got {alpha}")));
        }
        let projection = if projection_radius > 0.0 { ProjectionSpec::ball(projection_radius) } else { ProjectionSpec::disabled() };
        lift(projection.check_contains(env.prepared.steady.theta_star_slice()))?;
        let tables = env.prepared.tables.clone();
        let source = match sampler {
            EftdSampler::MeanPath => Source::MeanPath,
            EftdSampler::Iid => Source::Iid(IidSampler::new(tables, seed)),
            EftdSampler::Markov => Source::Markov(MarkovSampler::new(tables, seed)),
        };
        let agent = EftdAgent {
            env: env.prepared.clone(),
            state: AgentState::zeros(k),
            compressor: Compressor::new(spec, seed ^ 0x5eed),
            scratch: Scratch::new(k),
            source,
            alpha,
            projection,
        };
        *out = Box::into_raw(Box::new(agent));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn eftd_agent_free(agent: *mut EftdAgent) {
    if !agent.is_null() {
        drop(Box::from_raw(agent));
    }
}

/// Advances the agent by `steps` EF-TD steps.
#[no_mangle]
pub unsafe extern "C" fn eftd_agent_step(agent: *mut EftdAgent, steps: u64) -> EftdStatus {
    guard(|| {
        let a = agent.as_mut().ok_or_else(|| null("agent"))?;
        let env = a.env.clone();
        for _ in 0..steps {
            let tuple = match &mut a.source {
                Source::MeanPath => None,
                Source::Iid(s) => Some(s.next_tuple()),
                Source::Markov(s) => Some(s.next_tuple()),
            };
            match tuple {
                Some(x) => td_direction_into(&x, env.features(), env.gamma(), &a.state.theta, &mut a.scratch.g),
                None => env.steady.mean_path_direction_into(&a.state.theta, &mut a.scratch.g),
            }
            ef_step_with_direction(&mut a.state, a.alpha, &mut a.compressor, &a.projection, &mut a.scratch);
        }
        if a.state.theta.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err((EftdStatus::Numerical, "iterate is no longer finite".into()))
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn eftd_agent_theta(agent: *const EftdAgent, out: *mut f64, len: usize) -> EftdStatus {
    guard(|| {
        let a = agent.as_ref().ok_or_else(|| null("agent"))?;
        copy_out(&a.state.theta, out, len)
    })
}

/// Error-feedback memory `e_{t-1}`.
#[no_mangle]
pub unsafe extern "C" fn eftd_agent_memory(agent: *const EftdAgent, out: *mut f64, len: usize) -> EftdStatus {
    guard(|| {
        let a = agent.as_ref().ok_or_else(|| null("agent"))?;
        copy_out(&a.state.e, out, len)
    })
}

/// `‖θ_t − θ*‖²`.
#[no_mangle]
pub unsafe extern "C" fn eftd_agent_error(agent: *const EftdAgent, out: *mut f64) -> EftdStatus {
    guard(|| {
        let a = agent.as_ref().ok_or_else(|| null("agent"))?;
        let star = a.env.steady.theta_star_slice();
        let e = a.state.theta.iter().zip(star).map(|(x, y)| (x - y) * (x - y)).sum();
        *out.as_mut().ok_or_else(|| null("out"))? = e;
        Ok(())
    })
}

/// Steps taken so far.
#[no_mangle]
pub unsafe extern "C" fn eftd_agent_steps(agent: *const EftdAgent, out: *mut u64) -> EftdStatus {
    guard(|| {
        let a = agent.as_ref().ok_or_else(|| null("agent"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = a.state.t;
        Ok(())
    })
}

/// Applies a compressor to `x`, writing `len` values to `out`.
#[no_mangle]
pub unsafe extern "C" fn eftd_compress(compressor: *const c_char, x: *const f64, out: *mut f64, len: usize, seed: u64) -> EftdStatus {
    guard(|| {
        let text = c_str(compressor, "compressor")?;
        if x.is_null() {
            return Err(null("x"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = lift(CompressorSpec::parse(text, len))?;
        let input = slice::from_raw_parts(x, len).to_vec();
        let mut c = Compressor::new(spec, seed);
        c.apply(&input, slice::from_raw_parts_mut(out, len));
        Ok(())
    })
}

/// Distortion factor `δ` of a compressor on dimension `len`; negative for
/// non-contractive operators. For `randk:k` the value holds in expectation.
#[no_mangle]
pub unsafe extern "C" fn eftd_compressor_delta(compressor: *const c_char, len: usize, out: *mut f64) -> EftdStatus {
    guard(|| {
        let text = c_str(compressor, "compressor")?;
        let spec = lift(CompressorSpec::parse(text, len))?;
        *out.as_mut().ok_or_else(|| null("out"))? = spec.delta().value().unwrap_or(-1.0);
        Ok(())
    })
}
