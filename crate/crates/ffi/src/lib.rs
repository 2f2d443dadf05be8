//! C ABI over the editsearch engine.
//!
//! Every fallible function returns an [`EsStatus`]. On failure a message is
//! kept per thread and can be fetched with [`es_last_error`]. Strings handed
//! out by this library are owned by the caller and released with
//! [`es_string_free`]; run handles are released with [`es_run_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use editsearch::config::{derive_config, Preset};
use editsearch::controls::NoControls;
use editsearch::document;
use editsearch::events::NullSink;
use editsearch::generator::validate_thought;
use editsearch::harness::stats::linear_fit;
use editsearch::scheduler::{run, RunOptions, RunResult};
use editsearch::sim::{Schema, SimActorParams, SimTask, SimWorld};
use serde::Deserialize;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    RunFailed = 4,
    Panic = 5,
}

/// Least-squares fit of `y = slope * x + bias`. Standard errors are NaN when
/// the fit has no residual degrees of freedom.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsFit {
    pub slope: f64,
    pub bias: f64,
    pub slope_std_err: f64,
    pub bias_std_err: f64,
    pub residual_sum_squares: f64,
}

/// A finished simulated run.
pub struct EsRun {
    result: RunResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(EsStatus, String);

impl Failure {
    fn invalid(msg: impl ToString) -> Self {
        Failure(EsStatus::InvalidArgument, msg.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EsStatus {
    LAST_ERROR.with(|e| e.borrow_mut().take());
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            EsStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(EsStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(EsStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(EsStatus::NullArgument, format!("{name} is null")));
    }
    out.write(value);
    Ok(())
}

fn owned(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("interior nuls removed").into_raw()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn es_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy of the calling thread's last error message, or null if the last
/// call succeeded. Free with [`es_string_free`].
#[no_mangle]
pub extern "C" fn es_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |c| c.clone().into_raw()))
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn es_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Derived run configuration for `complexity` under `preset` (null means
/// `"main"`), written as JSON to `*out_json`.
///
/// # Safety
/// `preset` must be null or a NUL-terminated string; `out_json` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn es_derive_config(
    complexity: u32,
    preset: *const c_char,
    out_json: *mut *mut c_char,
) -> EsStatus {
    guard(|| {
        let preset = if preset.is_null() {
            Preset::Main
        } else {
            read_str(preset, "preset")?.parse().map_err(Failure::invalid)?
        };
        let cfg = derive_config(complexity, preset).map_err(Failure::invalid)?;
        let json = serde_json::to_string(&cfg).expect("config serializes");
        write_out(out_json, owned(json), "out_json")
    })
}

/// Checks a generator completion against its guided-decoding pattern. On
/// success the extracted instruction is written to `*out_instruction` unless
/// it is null; a violation returns `ES_STATUS_INVALID_ARGUMENT`.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out_instruction` must be null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn es_validate_thought(text: *const c_char, out_instruction: *mut *mut c_char) -> EsStatus {
    guard(|| {
        let thought = validate_thought(read_str(text, "text")?).map_err(Failure::invalid)?;
        if !out_instruction.is_null() {
            out_instruction.write(owned(thought.instruction));
        }
        Ok(())
    })
}

/// # Safety
/// `xs` and `ys` must each point to `n` readable doubles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn es_linear_fit(xs: *const f64, ys: *const f64, n: usize, out: *mut EsFit) -> EsStatus {
    guard(|| {
        if xs.is_null() || ys.is_null() {
            return Err(Failure(EsStatus::NullArgument, "xs or ys is null".into()));
        }
        let xs = std::slice::from_raw_parts(xs, n);
        let ys = std::slice::from_raw_parts(ys, n);
        let pts: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
        let f = linear_fit(&pts).map_err(Failure::invalid)?;
        let fit = EsFit {
            slope: f.slope.estimate,
            bias: f.bias.estimate,
            slope_std_err: f.slope.std_err.unwrap_or(f64::NAN),
            bias_std_err: f.bias.std_err.unwrap_or(f64::NAN),
            residual_sum_squares: f.residual_sum_squares,
        };
        write_out(out, fit, "out")
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SimRunRequest {
    #[serde(default)]
    task: Option<SimTask>,
    #[serde(default)]
    complexity: Option<u32>,
    #[serde(default)]
    task_seed: u64,
    #[serde(default)]
    preset: Option<Preset>,
    #[serde(default = "default_p")]
    p: f64,
    #[serde(default = "default_q")]
    q: f64,
    #[serde(default = "default_k")]
    k: u32,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    epsilon: f64,
}

fn default_p() -> f64 {
    0.85
}

fn default_q() -> f64 {
    0.05
}

fn default_k() -> u32 {
    2
}

fn sim_run(req: SimRunRequest) -> Result<RunResult, Failure> {
    let task = match (req.task, req.complexity) {
        (Some(t), _) => t,
        (None, Some(c)) => SimTask::generate(&Schema::default(), c, req.task_seed).map_err(Failure::invalid)?,
        (None, None) => return Err(Failure::invalid("give a task or a complexity")),
    };
    task.validate().map_err(Failure::invalid)?;
    let complexity = req.complexity.unwrap_or_else(|| task.complexity());
    let cfg = derive_config(complexity, req.preset.unwrap_or(Preset::Main)).map_err(Failure::invalid)?;
    let actor = SimActorParams {
        p: req.p,
        q: req.q,
        k: req.k,
        seed: req.seed,
    };
    actor.validate().map_err(Failure::invalid)?;
    let world = SimWorld {
        schema: task.schema.clone(),
        actor,
        epsilon: req.epsilon,
    };
    run(
        task.initial.to_ref(),
        &task.instruction(),
        &world.backends(),
        &cfg,
        &mut NoControls,
        &mut NullSink,
        &RunOptions::default(),
    )
    .map_err(|e| Failure(EsStatus::RunFailed, e.to_string()))
}

/// Runs a search against the simulated backends. `request_json` holds
/// either `task` (a sim task) or `complexity` (with optional `task_seed`),
/// plus optional `preset`, `p`, `q`, `k`, `seed` and `epsilon`.
///
/// # Safety
/// `request_json` must be a NUL-terminated string; `out_run` must be
/// writable. The handle must be released with [`es_run_free`].
#[no_mangle]
pub unsafe extern "C" fn es_sim_run(request_json: *const c_char, out_run: *mut *mut EsRun) -> EsStatus {
    guard(|| {
        let text = read_str(request_json, "request_json")?;
        if out_run.is_null() {
            return Err(Failure(EsStatus::NullArgument, "out_run is null".into()));
        }
        let req: SimRunRequest = serde_json::from_str(text).map_err(Failure::invalid)?;
        let result = sim_run(req)?;
        out_run.write(Box::into_raw(Box::new(EsRun { result })));
        Ok(())
    })
}

unsafe fn handle<'a>(run: *const EsRun) -> Result<&'a EsRun, Failure> {
    run.as_ref()
        .ok_or_else(|| Failure(EsStatus::NullArgument, "run is null".into()))
}

/// Number of non-root states in the run's topology.
///
/// # Safety
/// `run` must be a live handle; `out_size` must be writable.
#[no_mangle]
pub unsafe extern "C" fn es_run_size(run: *const EsRun, out_size: *mut usize) -> EsStatus {
    guard(|| write_out(out_size, handle(run)?.result.topology.size(), "out_size"))
}

/// Outcome summary as JSON: `final_states`, `termination`, `fallback_used`
/// and `size`.
///
/// # Safety
/// `run` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn es_run_result_json(run: *const EsRun, out_json: *mut *mut c_char) -> EsStatus {
    guard(|| {
        let r = &handle(run)?.result;
        let json = serde_json::json!({
            "final_states": r.final_states,
            "termination": r.termination,
            "fallback_used": r.fallback_used,
            "size": r.topology.size(),
        });
        write_out(out_json, owned(json.to_string()), "out_json")
    })
}

/// The run's topology document.
///
/// # Safety
/// `run` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn es_run_topology_json(run: *const EsRun, out_json: *mut *mut c_char) -> EsStatus {
    guard(|| {
        let doc = document::to_string(&handle(run)?.result.topology);
        write_out(out_json, owned(doc), "out_json")
    })
}

/// # Safety
/// `run` must be null or a handle from [`es_sim_run`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn es_run_free(run: *mut EsRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}
