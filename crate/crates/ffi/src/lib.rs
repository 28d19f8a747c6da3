//! C ABI over `moe_forge`: load a trained model and run inference.
//!
//! Every function returns a [`MoeStatus`]; on failure the message is
//! available from [`moe_last_error`] on the same thread. Models are opaque
//! handles released with [`moe_model_free`]. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use moe_forge::anytime::{alpha_scores, anytime_predict, AnytimeConfig, Policy};
use moe_forge::error::Error;
use moe_forge::moe::MoEModel;

/// Opaque model handle.
pub struct MoeModel {
    inner: MoEModel,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    InvalidModel = 5,
    VersionMismatch = 6,
    Panic = 7,
    Internal = 8,
}

/// Anytime policies; `LearnedGate` needs a model with an exit gate.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoePolicy {
    AlphaThreshold = 0,
    BaseConfidence = 1,
    GateConfidence = 2,
    LearnedGate = 3,
}

impl From<MoePolicy> for Policy {
    fn from(p: MoePolicy) -> Self {
        match p {
            MoePolicy::AlphaThreshold => Policy::AlphaThreshold,
            MoePolicy::BaseConfidence => Policy::BaseConfidence,
            MoePolicy::GateConfidence => Policy::GateConfidence,
            MoePolicy::LearnedGate => Policy::LearnedGate,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> MoeStatus {
    match e {
        Error::VersionMismatch { .. } => MoeStatus::VersionMismatch,
        Error::Io(_) => MoeStatus::Io,
        Error::Json(_) | Error::Checkpoint(_) | Error::Parse { .. } => MoeStatus::InvalidModel,
        Error::Shape { .. } | Error::InvalidArgument(_) | Error::NonFinite(_) => MoeStatus::InvalidArgument,
        _ => MoeStatus::Internal,
    }
}

struct Failure(MoeStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MoeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_error();
            MoeStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside moe_forge");
            MoeStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MoeStatus::NullPointer, format!("{what} is null"))
}

unsafe fn model_ref<'a>(m: *const MoeModel) -> Result<&'a MoEModel, Failure> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

unsafe fn input<'a>(x: *const f64, len: usize, expected: usize) -> Result<&'a [f64], Failure> {
    if x.is_null() {
        return Err(null("input"));
    }
    if len != expected {
        return Err(Failure(
            MoeStatus::InvalidArgument,
            format!("input has {len} values, model expects {expected}"),
        ));
    }
    Ok(std::slice::from_raw_parts(x, len))
}

unsafe fn write_out(values: &[f64], out: *mut f64, len: usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    if len < values.len() {
        return Err(Failure(
            MoeStatus::BufferTooSmall,
            format!("output buffer holds {len} values, need {}", values.len()),
        ));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

unsafe fn c_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Failure(MoeStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn store(out: *mut *mut MoeModel, model: MoEModel) -> Result<(), Failure> {
    *out = Box::into_raw(Box::new(MoeModel { inner: model }));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn moe_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call on the same thread.
#[no_mangle]
pub extern "C" fn moe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint from `path` into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn moe_model_load(path: *const c_char, out: *mut *mut MoeModel) -> MoeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = c_str(path, "path")?;
        store(out, MoEModel::load_json(Path::new(path))?)
    })
}

/// Parses a checkpoint from a JSON string into `*out`.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn moe_model_from_json(json: *const c_char, out: *mut *mut MoeModel) -> MoeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = c_str(json, "json")?;
        store(out, MoEModel::from_json_str(text)?)
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from a load function and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn moe_model_free(model: *mut MoeModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

/// Input dimension, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moe_model_input_dim(model: *const MoeModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.input_dim())
}

/// Number of classes, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moe_model_num_classes(model: *const MoeModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_classes())
}

/// Number of experts, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn moe_model_num_experts(model: *const MoeModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_experts())
}

/// Writes the gate distribution (K values) into `out`.
///
/// # Safety
/// `x` must point to `x_len` doubles and `out` to `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn moe_gate_distribution(
    model: *const MoeModel,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    out_len: usize,
) -> MoeStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = input(x, x_len, m.input_dim())?;
        write_out(&m.gate_distribution(x)?, out, out_len)
    })
}

/// Top-1 inference: class probabilities (C values) into `probs` and the
/// chosen expert into `*expert` when non-null.
///
/// # Safety
/// `x` must point to `x_len` doubles, `probs` to `probs_len` doubles and
/// `expert` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn moe_top1_predict(
    model: *const MoeModel,
    x: *const f64,
    x_len: usize,
    probs: *mut f64,
    probs_len: usize,
    expert: *mut usize,
) -> MoeStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = input(x, x_len, m.input_dim())?;
        let p = m.top1_predict(x)?;
        write_out(&p.probs, probs, probs_len)?;
        if !expert.is_null() {
            *expert = p.expert;
        }
        Ok(())
    })
}

/// Anytime inference at threshold `tau`. Writes C probabilities, and when
/// non-null, whether the base model answered alone and the MACs spent.
///
/// # Safety
/// `x` must point to `x_len` doubles, `probs` to `probs_len` doubles;
/// `exited` and `macs` must be null or valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn moe_anytime_predict(
    model: *const MoeModel,
    x: *const f64,
    x_len: usize,
    tau: f64,
    policy: MoePolicy,
    probs: *mut f64,
    probs_len: usize,
    exited: *mut bool,
    macs: *mut u64,
) -> MoeStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = input(x, x_len, m.input_dim())?;
        let out = anytime_predict(m, x, &AnytimeConfig::new(tau, policy.into()))?;
        write_out(&out.probs, probs, probs_len)?;
        if !exited.is_null() {
            *exited = out.early_exited;
        }
        if !macs.is_null() {
            *macs = out.macs;
        }
        Ok(())
    })
}

/// Per-expert anytime scores (K values) into `out`.
///
/// # Safety
/// `x` must point to `x_len` doubles and `out` to `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn moe_alpha_scores(
    model: *const MoeModel,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    out_len: usize,
) -> MoeStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = input(x, x_len, m.input_dim())?;
        write_out(&alpha_scores(m, x)?, out, out_len)
    })
}
