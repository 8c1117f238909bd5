//! C ABI over the drasmil evaluator: load a checkpoint and a bag, run full,
//! random or active-sampling evaluation, read back probabilities and
//! per-patch attention.
//!
//! Every fallible call returns a [`DrasStatus`]; on failure a message is
//! kept per thread and can be read with [`dras_last_error`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use drasmil::checkpoint::load_checkpoint;
use drasmil::sampler::{evaluate, CachedFeatures, SamplingResult};
use drasmil::slide::cache_read;
use drasmil::{Bag, Error, Matrix, Method, ModelParams, SamplingConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrasStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Corrupt = 4,
    Shape = 5,
    Config = 6,
    EmptyBag = 7,
    Internal = 8,
}

/// Evaluation strategy.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrasMethod {
    Full = 0,
    Random = 1,
    Active = 2,
}

/// Active-sampling settings. `dras_sampling_default` fills in the tuned
/// defaults. For `DRAS_METHOD_RANDOM` only `total_budget` is used.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrasSamplingConfig {
    pub total_budget: usize,
    pub iterations: usize,
    pub final_extra: usize,
    pub neighbours: usize,
    pub random_rate: f64,
    pub random_delta: f64,
}

/// Opaque trained model.
pub struct DrasModel {
    params: ModelParams,
}

/// Opaque bag of patch features.
pub struct DrasBag {
    bag: Bag,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).unwrap_or_default());
}

fn status_of(e: &Error) -> DrasStatus {
    match e {
        Error::File { .. } | Error::Io(_) => DrasStatus::Io,
        Error::CorruptCache(_) | Error::CorruptCheckpoint(_) | Error::Json(_) | Error::Csv(_) | Error::Image(_) => {
            DrasStatus::Corrupt
        }
        Error::Shape(_) | Error::NonFinite(_) => DrasStatus::Shape,
        Error::EmptyBag => DrasStatus::EmptyBag,
        Error::InvalidLabel(_) | Error::UndefinedMetric(_) => DrasStatus::InvalidArgument,
        Error::Config(_) | Error::AllTrialsFailed(_) => DrasStatus::Config,
    }
}

/// Run `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (DrasStatus, String)>) -> DrasStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DrasStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DrasStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (DrasStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DrasStatus, String) {
    (DrasStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, (DrasStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| (DrasStatus::InvalidArgument, "path is not UTF-8".into()))
}

/// Message of the last failed call on this thread, or "" after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dras_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Tuned defaults: 800 patches, 10 iterations, 160 final, 64 neighbours,
/// random rate 0.29 decaying by 0.36 per iteration.
#[no_mangle]
pub extern "C" fn dras_sampling_default() -> DrasSamplingConfig {
    let d = SamplingConfig::default();
    DrasSamplingConfig {
        total_budget: d.total_budget,
        iterations: d.iterations,
        final_extra: d.final_extra,
        neighbours: d.neighbours,
        random_rate: d.random_rate,
        random_delta: d.random_delta,
    }
}

/// Load a checkpoint written by `drasmil train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dras_model_load(path: *const c_char, out: *mut *mut DrasModel) -> DrasStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let (params, _) = load_checkpoint(path_arg(path)?).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(DrasModel { params }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `dras_model_load` and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dras_model_free(model: *mut DrasModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature width the model expects, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dras_model_embedding_dim(model: *const DrasModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.embedding_dim())
}

/// Load a feature cache written by `drasmil synth` or `drasmil patch`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dras_bag_load(path: *const c_char, out: *mut *mut DrasBag) -> DrasStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let bag = cache_read(path_arg(path)?).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(DrasBag { bag }));
        Ok(())
    })
}

/// Build a bag from `k` grid coordinates (`x0, y0, x1, y1, ...`) and a
/// row-major `k × m` feature matrix. Both arrays are copied.
///
/// # Safety
/// `coords` must hold `2k` values and `features` `k·m` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dras_bag_new(
    coords: *const u32,
    features: *const f64,
    k: usize,
    m: usize,
    label: u8,
    out: *mut *mut DrasBag,
) -> DrasStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if coords.is_null() || features.is_null() {
            return Err(null("coords or features"));
        }
        let cells = k
            .checked_mul(m)
            .ok_or((DrasStatus::InvalidArgument, "k * m overflows".to_string()))?;
        let xy = std::slice::from_raw_parts(coords, 2 * k);
        let coords = xy.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let data = std::slice::from_raw_parts(features, cells).to_vec();
        let matrix = Matrix::from_vec(k, m, data).map_err(lib_err)?;
        let bag = Bag::new("ffi", "ffi", label, coords, matrix).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(DrasBag { bag }));
        Ok(())
    })
}

/// # Safety
/// `bag` must come from `dras_bag_load`/`dras_bag_new` and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dras_bag_free(bag: *mut DrasBag) {
    if !bag.is_null() {
        drop(Box::from_raw(bag));
    }
}

/// Number of patches, or 0 for a null handle.
///
/// # Safety
/// `bag` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dras_bag_len(bag: *const DrasBag) -> usize {
    bag.as_ref().map_or(0, |b| b.bag.len())
}

unsafe fn run(
    model: *const DrasModel,
    bag: *const DrasBag,
    method: DrasMethod,
    config: *const DrasSamplingConfig,
    seed: u64,
) -> Result<(SamplingResult, usize), (DrasStatus, String)> {
    let model = model.as_ref().ok_or_else(|| null("model"))?;
    let bag = bag.as_ref().ok_or_else(|| null("bag"))?;
    let c = config.as_ref().copied().unwrap_or_else(|| dras_sampling_default());
    let method = match method {
        DrasMethod::Full => Method::Full,
        DrasMethod::Random => Method::Random {
            budget: c.total_budget,
        },
        DrasMethod::Active => Method::Dras(SamplingConfig {
            total_budget: c.total_budget,
            iterations: c.iterations,
            final_extra: c.final_extra,
            neighbours: c.neighbours,
            random_rate: c.random_rate,
            random_delta: c.random_delta,
            seed,
        }),
    };
    let result = evaluate(&model.params, &mut CachedFeatures(&bag.bag), &method, seed).map_err(lib_err)?;
    Ok((result, bag.bag.len()))
}

/// Positive-class probability of `bag`. `config` may be null for defaults.
///
/// # Safety
/// Handles must be live; `config` null or valid; `probability` writable.
#[no_mangle]
pub unsafe extern "C" fn dras_evaluate(
    model: *const DrasModel,
    bag: *const DrasBag,
    method: DrasMethod,
    config: *const DrasSamplingConfig,
    seed: u64,
    probability: *mut f64,
) -> DrasStatus {
    guard(|| {
        if probability.is_null() {
            return Err(null("probability"));
        }
        let (r, _) = run(model, bag, method, config, seed)?;
        *probability = r.positive_probability();
        Ok(())
    })
}

/// Per-patch attention of one evaluation (0 for patches never sampled),
/// written to `out`, which must hold exactly `dras_bag_len(bag)` values.
/// Also returns the probability when `probability` is non-null.
///
/// # Safety
/// Handles must be live; `out` must hold `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dras_attention_map(
    model: *const DrasModel,
    bag: *const DrasBag,
    method: DrasMethod,
    config: *const DrasSamplingConfig,
    seed: u64,
    out: *mut f64,
    out_len: usize,
    probability: *mut f64,
) -> DrasStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (r, len) = run(model, bag, method, config, seed)?;
        if out_len != len {
            return Err((
                DrasStatus::InvalidArgument,
                format!("output holds {out_len} values, bag has {len} patches"),
            ));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&r.attention_map(len));
        if !probability.is_null() {
            *probability = r.positive_probability();
        }
        Ok(())
    })
}
