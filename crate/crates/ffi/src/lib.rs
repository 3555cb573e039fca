//! C ABI over `gflowseq`.
//!
//! Objects are opaque handles created by `*_new` and released by the
//! matching `*_free`. Every fallible call returns a `GfsStatus`; on failure
//! the message is kept per thread and read with `gfs_last_error`.
//! Strings cross the boundary as NUL-terminated UTF-8. Output strings are
//! written into caller buffers: the call reports the required size
//! (including the NUL) and returns `GFS_BUFFER_TOO_SMALL` when it does not fit.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use gflowseq::cli::RunConfig;
use gflowseq::envs::{Env, EnvConfig};
use gflowseq::eval::{enumerate_target, episode_rng};
use gflowseq::policy::{Policy, PolicyConfig, PolicyParameters};
use gflowseq::training::{sft_initialize, Trainer};
use gflowseq::trajectory::Trajectory;
use gflowseq::Error;

/// Result of every fallible call.
#[repr(C)]
#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GfsStatus {
    GFS_OK = 0,
    GFS_NULL_POINTER = 1,
    GFS_INVALID_UTF8 = 2,
    /// Bad JSON, unknown field or out-of-range setting.
    GFS_CONFIG = 3,
    /// Requested operation is not defined for this environment.
    GFS_UNSUPPORTED = 4,
    /// Training diverged (non-finite or runaway loss).
    GFS_DIVERGED = 5,
    GFS_IO = 6,
    GFS_BUFFER_TOO_SMALL = 7,
    /// Any other runtime failure.
    GFS_RUNTIME = 8,
    GFS_PANIC = 9,
}

use GfsStatus::*;

/// A policy network with its parameters.
pub struct GfsPolicy {
    inner: Policy,
}

/// A training run over one environment.
pub struct GfsTrainer {
    inner: Trainer,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> GfsStatus {
    match e {
        Error::Config(_) | Error::Json(_) => GFS_CONFIG,
        Error::Unsupported(_) | Error::TooLarge { .. } => GFS_UNSUPPORTED,
        Error::Diverged { .. } => GFS_DIVERGED,
        Error::Io(_) => GFS_IO,
        _ => GFS_RUNTIME,
    }
}

fn guard(f: impl FnOnce() -> Result<(), GfsStatus>) -> GfsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GFS_OK,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("panic inside gflowseq".into());
            GFS_PANIC
        }
    }
}

fn fail(e: Error) -> GfsStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, GfsStatus> {
    if p.is_null() {
        set_error(format!("{name} is null"));
        return Err(GFS_NULL_POINTER);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{name} is not valid UTF-8"));
        GFS_INVALID_UTF8
    })
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, GfsStatus> {
    p.as_ref().ok_or_else(|| {
        set_error(format!("{name} is null"));
        GFS_NULL_POINTER
    })
}

unsafe fn mut_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, GfsStatus> {
    p.as_mut().ok_or_else(|| {
        set_error(format!("{name} is null"));
        GFS_NULL_POINTER
    })
}

fn json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, GfsStatus> {
    serde_json::from_str(text).map_err(|e| fail(Error::Config(e.to_string())))
}

unsafe fn write_str(s: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> Result<(), GfsStatus> {
    let n = s.len() + 1;
    if !needed.is_null() {
        *needed = n;
    }
    if buf.is_null() || cap < n {
        set_error(format!("buffer of {cap} bytes, {n} needed"));
        return Err(GFS_BUFFER_TOO_SMALL);
    }
    std::ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gfs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the calling thread's last error message into `buf`.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes; `needed` null or writable.
#[no_mangle]
pub unsafe extern "C" fn gfs_last_error(buf: *mut c_char, cap: usize, needed: *mut usize) -> GfsStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match write_str(&msg, buf, cap, needed) {
        Ok(()) => GFS_OK,
        Err(s) => s,
    }
}

/// Creates a freshly initialised policy from a policy config JSON object
/// (`"{}"` for defaults).
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gfs_policy_new(config_json: *const c_char, seed: u64, out: *mut *mut GfsPolicy) -> GfsStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        let cfg: PolicyConfig = json(str_arg(config_json, "config_json")?)?;
        let inner = Policy::new(cfg, seed).map_err(fail)?;
        *out = Box::into_raw(Box::new(GfsPolicy { inner }));
        Ok(())
    })
}

/// Loads `policy.bin`/`policy.json` from `dir`; shapes must match the config.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gfs_policy_load(
    config_json: *const c_char,
    dir: *const c_char,
    out: *mut *mut GfsPolicy,
) -> GfsStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        let cfg: PolicyConfig = json(str_arg(config_json, "config_json")?)?;
        let params = PolicyParameters::load(Path::new(str_arg(dir, "dir")?), "policy").map_err(fail)?;
        let inner = Policy::with_params(cfg, params).map_err(fail)?;
        *out = Box::into_raw(Box::new(GfsPolicy { inner }));
        Ok(())
    })
}

/// Writes `policy.bin`/`policy.json` into `dir`.
///
/// # Safety
/// `policy` must come from this library; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gfs_policy_save(policy: *const GfsPolicy, dir: *const c_char) -> GfsStatus {
    guard(|| {
        let p = ref_arg(policy, "policy")?;
        p.inner.params.save(Path::new(str_arg(dir, "dir")?), "policy").map_err(fail)
    })
}

/// # Safety
/// `policy` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gfs_policy_free(policy: *mut GfsPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Number of scalar parameters, or 0 for a null handle.
///
/// # Safety
/// `policy` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gfs_policy_num_parameters(policy: *const GfsPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.inner.params.num_parameters())
}

/// Samples one episode and writes it as a JSON trajectory.
///
/// # Safety
/// Pointers must be valid as described in the module docs.
#[no_mangle]
pub unsafe extern "C" fn gfs_policy_sample(
    policy: *const GfsPolicy,
    env_json: *const c_char,
    seed: u64,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> GfsStatus {
    guard(|| {
        let p = ref_arg(policy, "policy")?;
        let env: EnvConfig = json(str_arg(env_json, "env_json")?)?;
        env.validate().map_err(fail)?;
        let mut rng = episode_rng(seed, 0);
        let traj = p.inner.rollout(Env::reset(&env, seed).map_err(fail)?, &mut rng).map_err(fail)?;
        let text = serde_json::to_string(&traj).map_err(|e| fail(e.into()))?;
        write_str(&text, buf, cap, needed)
    })
}

/// Log-probability of the actions of a JSON trajectory under the policy.
///
/// # Safety
/// Pointers must be valid as described in the module docs.
#[no_mangle]
pub unsafe extern "C" fn gfs_policy_log_prob(
    policy: *const GfsPolicy,
    trajectory_json: *const c_char,
    out: *mut f64,
) -> GfsStatus {
    guard(|| {
        let p = ref_arg(policy, "policy")?;
        let out = mut_arg(out, "out")?;
        let traj: Trajectory = json(str_arg(trajectory_json, "trajectory_json")?)?;
        *out = p.inner.trajectory_log_prob(&traj).map_err(fail)?;
        Ok(())
    })
}

/// Writes the exact target distribution of an enumerable environment as a
/// JSON object mapping trajectory keys to probabilities.
///
/// # Safety
/// Pointers must be valid as described in the module docs.
#[no_mangle]
pub unsafe extern "C" fn gfs_oracle_distribution(
    env_json: *const c_char,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> GfsStatus {
    guard(|| {
        let env: EnvConfig = json(str_arg(env_json, "env_json")?)?;
        env.validate().map_err(fail)?;
        let table = enumerate_target(&env).map_err(fail)?;
        let text = serde_json::to_string(&table.distribution()).map_err(|e| fail(e.into()))?;
        write_str(&text, buf, cap, needed)
    })
}

/// Builds a trainer from a full run config JSON, running SFT first when
/// the config enables it.
///
/// # Safety
/// `run_config_json` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gfs_trainer_new(run_config_json: *const c_char, out: *mut *mut GfsTrainer) -> GfsStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        let cfg = RunConfig::from_json(str_arg(run_config_json, "run_config_json")?).map_err(fail)?;
        let mut tc = cfg.trainer.clone();
        tc.seed = cfg.seed;
        let mut policy = Policy::new(cfg.policy.clone(), cfg.seed).map_err(fail)?;
        if tc.sft_init {
            sft_initialize(&mut policy, &cfg.env, &tc.sft, cfg.seed).map_err(fail)?;
        }
        let inner = Trainer::new(cfg.env, policy, tc).map_err(fail)?;
        *out = Box::into_raw(Box::new(GfsTrainer { inner }));
        Ok(())
    })
}

/// # Safety
/// `trainer` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gfs_trainer_free(trainer: *mut GfsTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

/// Runs up to `n` further tasks (stopping at the configured total) and
/// reports the loss of the last one. `last_loss` may be null.
///
/// # Safety
/// `trainer` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gfs_trainer_run(trainer: *mut GfsTrainer, n: usize, last_loss: *mut f64) -> GfsStatus {
    guard(|| {
        let t = &mut mut_arg(trainer, "trainer")?.inner;
        let end = (t.step() + n).min(t.config.tasks);
        let mut loss = f64::NAN;
        while t.step() < end {
            loss = t.run_task(t.step()).map_err(fail)?.loss;
        }
        if !last_loss.is_null() {
            *last_loss = loss;
        }
        Ok(())
    })
}

/// Optimizer updates taken so far, or 0 for a null handle.
///
/// # Safety
/// `trainer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gfs_trainer_step(trainer: *const GfsTrainer) -> usize {
    trainer.as_ref().map_or(0, |t| t.inner.step())
}

/// Copies the current policy into a new handle owned by the caller.
///
/// # Safety
/// `trainer` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gfs_trainer_policy(trainer: *const GfsTrainer, out: *mut *mut GfsPolicy) -> GfsStatus {
    guard(|| {
        let t = ref_arg(trainer, "trainer")?;
        let out = mut_arg(out, "out")?;
        *out = Box::into_raw(Box::new(GfsPolicy { inner: t.inner.policy.clone() }));
        Ok(())
    })
}

/// Saves parameters, optimizer moments and metrics into `dir`.
///
/// # Safety
/// `trainer` must be a live handle; `dir` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gfs_trainer_save(trainer: *const GfsTrainer, dir: *const c_char) -> GfsStatus {
    guard(|| {
        let t = ref_arg(trainer, "trainer")?;
        t.inner.state().save(Path::new(str_arg(dir, "dir")?)).map_err(fail)
    })
}
