//! C ABI for the prunekit toolkit.
//!
//! Conventions:
//! - Models are opaque handles created and destroyed by this library; free
//!   them with [`pk_model_free`].
//! - Every fallible call returns a [`PkStatus`]; on failure,
//!   [`pk_last_error_message`] returns a thread-local, NUL-terminated
//!   description that stays valid until the next failing call on the same
//!   thread.
//! - Strings returned through `char **` out-params are owned by the caller
//!   and must be released with [`pk_string_free`].
//! - Batches are passed as row-major `float` feature buffers (`n * dim`)
//!   plus `uint8_t` labels in {0, 1}.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use prunekit::compress::{deserialize, measure_sizes, serialize, StoragePrecision};
use prunekit::damage::{
    aggregate_to_neurons, damage_by_method, damage_dropout_regression, DamageMethod,
    DropoutRegressionConfig,
};
use prunekit::data::{synth_generate, write_csv, SynthConfig};
use prunekit::error::Error;
use prunekit::metrics::{roc_auc, tpr_at_fpr};
use prunekit::nn::model::{Batch, Model, ModelSpec};
use prunekit::nn::train::{train, TrainConfig};
use prunekit::nn::{forward, init_random, Mode};
use prunekit::prune::{
    merge_neurons, prune_neurons, prune_parameters, MergeStyle, PruneScope, SelectionMethod,
};
use prunekit::scalar::Precision;

/// Status code returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PkStatus {
    PkOk = 0,
    PkNullPointer = 1,
    PkInvalidArgument = 2,
    PkBadModel = 3,
    PkNumericError = 4,
    PkIoError = 5,
    PkInternalError = 6,
}

/// Opaque model handle.
pub struct PkModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let cleaned: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(cleaned).unwrap());
}

fn status_for(err: &Error) -> PkStatus {
    match err {
        Error::InvalidSpec(_)
        | Error::InvalidArgument(_)
        | Error::Mismatch(_)
        | Error::Config(_)
        | Error::SingularSystem(_)
        | Error::BadCsv { .. } => PkStatus::PkInvalidArgument,
        Error::BadModelFile(_) => PkStatus::PkBadModel,
        Error::NonFinite(_) | Error::Diverged { .. } => PkStatus::PkNumericError,
        Error::Io(_) => PkStatus::PkIoError,
    }
}

fn fail(err: Error) -> PkStatus {
    set_error(&err.to_string());
    status_for(&err)
}

fn guard<F: FnOnce() -> PkStatus>(f: F) -> PkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            PkStatus::PkInternalError
        }
    }
}

unsafe fn cstr<'a>(p: *const c_char) -> Result<&'a str, PkStatus> {
    if p.is_null() {
        set_error("null string pointer");
        return Err(PkStatus::PkNullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("string is not valid UTF-8");
        PkStatus::PkInvalidArgument
    })
}

unsafe fn model_ref<'a>(m: *const PkModel) -> Result<&'a Model, PkStatus> {
    if m.is_null() {
        set_error("null model handle");
        return Err(PkStatus::PkNullPointer);
    }
    Ok(&(*m).inner)
}

unsafe fn batch_view<'a>(
    features: *const f32,
    labels: *const u8,
    n: usize,
    dim: usize,
) -> Result<Batch<'a>, PkStatus> {
    if features.is_null() || labels.is_null() {
        set_error("null batch pointer");
        return Err(PkStatus::PkNullPointer);
    }
    let feats = std::slice::from_raw_parts(features, n * dim);
    let labs = std::slice::from_raw_parts(labels, n);
    Batch::new(feats, labs, n, dim).map_err(fail)
}

fn emit_model(model: Model, out: *mut *mut PkModel) -> PkStatus {
    if out.is_null() {
        set_error("null output handle");
        return PkStatus::PkNullPointer;
    }
    unsafe {
        *out = Box::into_raw(Box::new(PkModel { inner: model }));
    }
    PkStatus::PkOk
}

fn storage_precision(code: i32) -> Result<StoragePrecision, PkStatus> {
    match code {
        0 => Ok(StoragePrecision::F32),
        1 => Ok(StoragePrecision::F16),
        other => {
            set_error(&format!("precision code {other} is not 0 (f32) or 1 (f16)"));
            Err(PkStatus::PkInvalidArgument)
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread. Never NULL; empty
/// before the first failure. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn pk_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Frees a string allocated by this library.
///
/// # Safety
/// `s` must have come from a `char **` out-param of this library and not
/// have been freed already. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn pk_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a randomly initialized model from an architecture description in
/// JSON, e.g. `{"input_dim":8,"hidden":[{"width":16,"activation":"elu",
/// "batchnorm":true,"dropout":0.0}],"output_width":1}`.
///
/// # Safety
/// `spec_json` must be a valid NUL-terminated string and `out` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn pk_model_init_random(
    spec_json: *const c_char,
    seed: u64,
    out: *mut *mut PkModel,
) -> PkStatus {
    guard(|| {
        let json = match cstr(spec_json) {
            Ok(s) => s,
            Err(st) => return st,
        };
        let spec: ModelSpec = match serde_json::from_str(json) {
            Ok(s) => s,
            Err(e) => {
                set_error(&format!("spec json: {e}"));
                return PkStatus::PkInvalidArgument;
            }
        };
        match init_random(&spec, seed) {
            Ok(m) => emit_model(m, out),
            Err(e) => fail(e),
        }
    })
}

/// Loads a serialized model file (f32 or f16).
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pk_model_load(path: *const c_char, out: *mut *mut PkModel) -> PkStatus {
    guard(|| {
        let path = match cstr(path) {
            Ok(s) => s,
            Err(st) => return st,
        };
        let bytes = match std::fs::read(Path::new(path)) {
            Ok(b) => b,
            Err(e) => {
                set_error(&format!("{path}: {e}"));
                return PkStatus::PkIoError;
            }
        };
        match deserialize(&bytes) {
            Ok(m) => emit_model(m, out),
            Err(e) => fail(e),
        }
    })
}

/// Serializes a model to a file at the given precision (0 = f32, 1 = f16).
///
/// # Safety
/// `model` must be a live handle and `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pk_model_save(
    model: *const PkModel,
    path: *const c_char,
    precision: i32,
) -> PkStatus {
    guard(|| {
        let m = match model_ref(model) {
            Ok(m) => m,
            Err(st) => return st,
        };
        let path = match cstr(path) {
            Ok(s) => s,
            Err(st) => return st,
        };
        let precision = match storage_precision(precision) {
            Ok(p) => p,
            Err(st) => return st,
        };
        let enc = serialize(m, precision);
        match std::fs::write(Path::new(path), &enc.bytes) {
            Ok(()) => PkStatus::PkOk,
            Err(e) => {
                set_error(&format!("{path}: {e}"));
                PkStatus::PkIoError
            }
        }
    })
}

/// Releases a model handle. NULL is a no-op.
///
/// # Safety
/// `model` must have come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn pk_model_free(model: *mut PkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Deep-copies a model handle.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pk_model_clone(
    model: *const PkModel,
    out: *mut *mut PkModel,
) -> PkStatus {
    guard(|| match model_ref(model) {
        Ok(m) => emit_model(m.clone(), out),
        Err(st) => st,
    })
}

/// Feature width the model expects.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pk_model_input_dim(model: *const PkModel, out: *mut usize) -> PkStatus {
    guard(|| {
        let m = match model_ref(model) {
            Ok(m) => m,
            Err(st) => return st,
        };
        if out.is_null() {
            set_error("null output pointer");
            return PkStatus::PkNullPointer;
        }
        *out = m.spec.input_dim;
        PkStatus::PkOk
    })
}

/// Writes the hidden layer widths into `widths` (up to `capacity` elements)
/// and the true count into `count`. Fails when capacity is too small.
///
/// # Safety
/// `model` must be live; `widths` must point to `capacity` writable
/// elements; `count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pk_model_hidden_widths(
    model: *const PkModel,
    widths: *mut usize,
    capacity: usize,
    count: *mut usize,
) -> PkStatus {
    guard(|| {
        let m = match model_ref(model) {
            Ok(m) => m,
            Err(st) => return st,
        };
        if widths.is_null() || count.is_null() {
            set_error("null output pointer");
            return PkStatus::PkNullPointer;
        }
        let w = m.spec.hidden_widths();
        *count = w.len();
        if capacity < w.len() {
            set_error(&format!("capacity {capacity} < {} hidden layers", w.len()));
            return PkStatus::PkInvalidArgument;
        }
        for (i, v) in w.iter().enumerate() {
            *widths.add(i) = *v;
        }
        PkStatus::PkOk
    })
}

/// Total and nonzero trainable parameter counts.
///
/// # Safety
/// `model` must be live; both out-pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pk_model_param_counts(
    model: *const PkModel,
    total: *mut u64,
    nonzero: *mut u64,
) -> PkStatus {
    guard(|| {
        let m = match model_ref(model) {
            Ok(m) => m,
            Err(st) => return st,
        };
        if total.is_null() || nonzero.is_null() {
            set_error("null output pointer");
            return PkStatus::PkNullPointer;
        }
        let sizes = measure_sizes(m, StoragePrecision::F32);
        *total = sizes.param_count as u64;
        *nonzero = sizes.nonzero_param_count as u64;
        PkStatus::PkOk
    })
}

/// Raw and zipped serialized sizes at a precision (0 = f32, 1 = f16).
///
/// # Safety
/// `model` must be live; both out-pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pk_model_measure_sizes(
    model: *const PkModel,
    precision: i32,
    raw_bytes: *mut u64,
    zip_bytes: *mut u64,
) -> PkStatus {
    guard(|| {
        let m = match model_ref(model) {
            Ok(m) => m,
            Err(st) => return st,
        };
        if raw_bytes.is_null() || zip_bytes.is_null() {
            set_error("null output pointer");
            return PkStatus::PkNullPointer;
        }
        let precision = match storage_precision(precision) {
            Ok(p) => p,
            Err(st) => return st,
        };
        let sizes = measure_sizes(m, precision);
        *raw_bytes = sizes.raw_bytes as u64;
        *zip_bytes = sizes.zip_bytes as u64;
        PkStatus::PkOk
    })
}

/// Eval-mode sigmoid scores for `n` samples into `scores_out` (length `n`).
///
/// # Safety
/// `model` must be live; `features` must hold `n * dim` floats;
/// `scores_out` must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn pk_model_predict(
    model: *const PkModel,
    features: *const f32,
    n: usize,
    dim: usize,
    scores_out: *mut f64,
) -> PkStatus {
    guard(|| {
        let m = match model_ref(model) {
            Ok(m) => m,
            Err(st) => return st,
        };
        if features.is_null() || scores_out.is_null() {
            set_error("null pointer");
            return PkStatus::PkNullPointer;
        }
        let feats = std::slice::from_raw_parts(features, n * dim);
        match forward(m, feats, n, dim, Mode::Eval, 0, Precision::F32) {
            Ok(scores) => {
                std::ptr::copy_nonoverlapping(scores.as_ptr(), scores_out, n);
                PkStatus::PkOk
            }
            Err(e) => fail(e),
        }
    })
}

/// SGD-trains the model in place.
///
/// # Safety
/// `model` must be a live, uniquely held handle; `features` must hold
/// `n * dim` floats and `labels` `n` bytes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pk_model_train(
    model: *mut PkModel,
    features: *const f32,
    labels: *const u8,
    n: usize,
    dim: usize,
    epochs: usize,
    batch_size: usize,
    learning_rate: f32,
    seed: u64,
) -> PkStatus {
    guard(|| {
        if model.is_null() {
            set_error("null model handle");
            return PkStatus::PkNullPointer;
        }
        let batch = match batch_view(features, labels, n, dim) {
            Ok(b) => b,
            Err(st) => return st,
        };
        let cfg = TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            seed,
        };
        match train(&(*model).inner, &batch, &cfg) {
            Ok(trained) => {
                (*model).inner = trained;
                PkStatus::PkOk
            }
            Err(e) => fail(e),
        }
    })
}

unsafe fn parse_damage_method(method: *const c_char) -> Result<DamageMethod, PkStatus> {
    let s = cstr(method)?;
    DamageMethod::from_name(s).ok_or_else(|| {
        set_error(&format!(
            "unknown parameter-level method `{s}` (random | magnitude | obd | obd_sd | lm)"
        ));
        PkStatus::PkInvalidArgument
    })
}

/// Computes a parameter-level damage report and returns it as CSV
/// (`layer,row,col,damage,mean,sd`). The batch may be empty (`n == 0`) for
/// the `random` and `magnitude` methods.
///
/// # Safety
/// `model` must be live; `method` a valid string; `csv_out` a valid
/// pointer; batch buffers as in [`pk_model_train`] when `n > 0`.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pk_damage_report_csv(
    model: *const PkModel,
    method: *const c_char,
    features: *const f32,
    labels: *const u8,
    n: usize,
    dim: usize,
    seed: u64,
    csv_out: *mut *mut c_char,
) -> PkStatus {
    guard(|| {
        let m = match model_ref(model) {
            Ok(m) => m,
            Err(st) => return st,
        };
        if csv_out.is_null() {
            set_error("null output pointer");
            return PkStatus::PkNullPointer;
        }
        let method = match parse_damage_method(method) {
            Ok(dm) => dm,
            Err(st) => return st,
        };
        let batch = if n > 0 {
            match batch_view(features, labels, n, dim) {
                Ok(b) => Some(b),
                Err(st) => return st,
            }
        } else {
            None
        };
        match damage_by_method(m, method, batch.as_ref(), seed, Precision::F32) {
            Ok(report) => {
                let csv = CString::new(report.to_csv()).unwrap();
                *csv_out = csv.into_raw();
                PkStatus::PkOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Masks the lowest-damage `fraction` of each hidden layer's parameters,
/// returning a new model handle.
///
/// # Safety
/// Pointer contracts as in [`pk_damage_report_csv`]; `out` must be valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pk_prune_parameters(
    model: *const PkModel,
    method: *const c_char,
    features: *const f32,
    labels: *const u8,
    n: usize,
    dim: usize,
    fraction: f64,
    seed: u64,
    out: *mut *mut PkModel,
) -> PkStatus {
    guard(|| {
        let m = match model_ref(model) {
            Ok(m) => m,
            Err(st) => return st,
        };
        let method = match parse_damage_method(method) {
            Ok(dm) => dm,
            Err(st) => return st,
        };
        let batch = if n > 0 {
            match batch_view(features, labels, n, dim) {
                Ok(b) => Some(b),
                Err(st) => return st,
            }
        } else {
            None
        };
        let result = damage_by_method(m, method, batch.as_ref(), seed, Precision::F32)
            .and_then(|report| prune_parameters(m, &report, fraction, PruneScope::PerLayer, true));
        match result {
            Ok(pruned) => emit_model(pruned, out),
            Err(e) => fail(e),
        }
    })
}

/// Structurally removes `fraction` of neurons per hidden layer (or globally
/// with a scarcity penalty when `global_scope` is nonzero), returning a new
/// model handle. `method` may be any estimator name, `dropout`, or `merge`.
///
/// # Safety
/// Pointer contracts as in [`pk_damage_report_csv`]; `out` must be valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pk_prune_neurons(
    model: *const PkModel,
    method: *const c_char,
    features: *const f32,
    labels: *const u8,
    n: usize,
    dim: usize,
    fraction: f64,
    global_scope: i32,
    layer_floor: usize,
    seed: u64,
    out: *mut *mut PkModel,
) -> PkStatus {
    guard(|| {
        let m = match model_ref(model) {
            Ok(m) => m,
            Err(st) => return st,
        };
        let method = match cstr(method).and_then(|s| {
            SelectionMethod::from_name(s).ok_or_else(|| {
                set_error(&format!("unknown method `{s}`"));
                PkStatus::PkInvalidArgument
            })
        }) {
            Ok(sm) => sm,
            Err(st) => return st,
        };
        let batch = if n > 0 {
            match batch_view(features, labels, n, dim) {
                Ok(b) => Some(b),
                Err(st) => return st,
            }
        } else {
            None
        };
        let scope = if global_scope != 0 {
            PruneScope::Global
        } else {
            PruneScope::PerLayer
        };
        let result = (|| {
            let pruned = match method {
                SelectionMethod::Merge => {
                    let mut current = m.clone();
                    for li in 0..current.hidden_count() {
                        let width = current.layers[li].out_dim;
                        let count = (fraction * width as f64).ceil() as usize;
                        current = merge_neurons(&current, li, count, MergeStyle::SumOutgoing)?;
                    }
                    current
                }
                SelectionMethod::DropoutRegression => {
                    let batch = batch.as_ref().ok_or_else(|| {
                        Error::InvalidArgument("dropout method needs a batch".into())
                    })?;
                    let cfg = DropoutRegressionConfig::defaults_for(m, seed);
                    let report = damage_dropout_regression(m, batch, &cfg)?;
                    prune_neurons(m, &report, fraction, scope, layer_floor)?
                }
                SelectionMethod::Damage(dm) => {
                    let report = damage_by_method(m, dm, batch.as_ref(), seed, Precision::F32)?;
                    let nreport = aggregate_to_neurons(&report, m, false)?;
                    prune_neurons(m, &nreport, fraction, scope, layer_floor)?
                }
            };
            Ok::<Model, Error>(pruned)
        })();
        match result {
            Ok(pruned) => emit_model(pruned, out),
            Err(e) => fail(e),
        }
    })
}

/// ROC AUC of scores against binary labels.
///
/// # Safety
/// `scores` must hold `n` doubles, `labels` `n` bytes, `out` one double.
#[no_mangle]
pub unsafe extern "C" fn pk_metrics_auc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> PkStatus {
    guard(|| {
        if scores.is_null() || labels.is_null() || out.is_null() {
            set_error("null pointer");
            return PkStatus::PkNullPointer;
        }
        let s = std::slice::from_raw_parts(scores, n);
        let l = std::slice::from_raw_parts(labels, n);
        match roc_auc(s, l) {
            Ok(v) => {
                *out = v;
                PkStatus::PkOk
            }
            Err(e) => fail(e),
        }
    })
}

/// TPR at the given false-positive-rate budget.
///
/// # Safety
/// Pointer contracts as in [`pk_metrics_auc`].
#[no_mangle]
pub unsafe extern "C" fn pk_metrics_tpr_at_fpr(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    target_fpr: f64,
    out: *mut f64,
) -> PkStatus {
    guard(|| {
        if scores.is_null() || labels.is_null() || out.is_null() {
            set_error("null pointer");
            return PkStatus::PkNullPointer;
        }
        let s = std::slice::from_raw_parts(scores, n);
        let l = std::slice::from_raw_parts(labels, n);
        match tpr_at_fpr(s, l, target_fpr) {
            Ok(v) => {
                *out = v;
                PkStatus::PkOk
            }
            Err(e) => fail(e),
        }
    })
}

/// Generates the synthetic benchmark data described by a JSON
/// [`SynthConfig`] and writes train/test CSV files.
///
/// # Safety
/// All three arguments must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn pk_synth_to_csv(
    config_json: *const c_char,
    train_path: *const c_char,
    test_path: *const c_char,
) -> PkStatus {
    guard(|| {
        let json = match cstr(config_json) {
            Ok(s) => s,
            Err(st) => return st,
        };
        let cfg: SynthConfig = match serde_json::from_str(json) {
            Ok(c) => c,
            Err(e) => {
                set_error(&format!("synth config json: {e}"));
                return PkStatus::PkInvalidArgument;
            }
        };
        let (train_p, test_p) = match (cstr(train_path), cstr(test_path)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(st), _) | (_, Err(st)) => return st,
        };
        let result = synth_generate(&cfg).and_then(|(tr, te)| {
            write_csv(&tr, Path::new(train_p))?;
            write_csv(&te, Path::new(test_p))
        });
        match result {
            Ok(()) => PkStatus::PkOk,
            Err(e) => fail(e),
        }
    })
}
