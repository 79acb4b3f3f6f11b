//! C ABI over the fall-detection library: load a trained model file, classify
//! fixed-size windows, or feed samples one at a time through a sliding
//! window. The generated header lands in `include/falldef.h`.
//!
//! Conventions:
//! - Handles are opaque; create/free them only through these functions.
//! - Every fallible call returns a `FalldefStatus`; anything but
//!   `Ok`/`Buffering` leaves a message readable via
//!   [`falldef_last_error_message`].
//! - Handles are not synchronized: share a `FalldefModel` across threads
//!   freely after loading, but confine each `FalldefStream` to one thread.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use falldef::dataset::Label;
use falldef::dgru::{load_model, predict_values, DgruModel, ModelError};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FalldefStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// The path was not valid UTF-8.
    InvalidPath = 2,
    /// The model file could not be read.
    Io = 3,
    /// The model file was read but is not a valid model (bad JSON, wrong
    /// format version, malformed fields).
    MalformedModel = 4,
    /// The window length does not match the model's expected window size.
    BadWindow = 5,
    /// Sample values were non-finite, or inference failed numerically.
    Numeric = 6,
    /// The stream has buffered the sample but does not hold a full window
    /// yet; no classification was produced. Not a failure.
    Buffering = 7,
    /// An internal invariant was violated. A bug; please report it.
    Panic = 8,
}

/// A loaded classifier. Obtained from [`falldef_model_load`]; release with
/// [`falldef_model_free`].
pub struct FalldefModel {
    inner: Arc<DgruModel>,
}

/// A per-source sliding window bound to one model. Streams keep their own
/// reference to the model, so the order of `free` calls does not matter.
pub struct FalldefStream {
    model: Arc<DgruModel>,
    window: VecDeque<[f64; 3]>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).ok();
    });
}

fn clear_error() {
    LAST_ERROR.with(|slot| slot.borrow_mut().take());
}

fn status_for(err: &ModelError) -> FalldefStatus {
    match err {
        ModelError::Io { .. } => FalldefStatus::Io,
        ModelError::Json { .. }
        | ModelError::UnsupportedVersion { .. }
        | ModelError::InvalidField { .. } => FalldefStatus::MalformedModel,
        ModelError::WindowLength { .. } => FalldefStatus::BadWindow,
        _ => FalldefStatus::Numeric,
    }
}

/// Run `body` with panics converted to `FalldefStatus::Panic` so unwinding
/// never crosses the C boundary.
fn guarded(body: impl FnOnce() -> FalldefStatus) -> FalldefStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic".to_string());
            FalldefStatus::Panic
        }
    }
}

fn classify(
    model: &DgruModel,
    window: &[[f64; 3]],
    is_fall: *mut c_int,
    p_fall: *mut f64,
) -> FalldefStatus {
    for sample in window {
        if sample.iter().any(|v| !v.is_finite()) {
            set_error("sample values must be finite".to_string());
            return FalldefStatus::Numeric;
        }
    }
    match predict_values(model, window) {
        Ok((label, p)) => {
            if !is_fall.is_null() {
                unsafe { *is_fall = c_int::from(label == Label::Fall) };
            }
            if !p_fall.is_null() {
                unsafe { *p_fall = p };
            }
            FalldefStatus::Ok
        }
        Err(e) => {
            let status = status_for(&e);
            set_error(e.to_string());
            status
        }
    }
}

/// Load a model file produced by training.
///
/// On success writes a new handle to `out` and returns `Ok`. On failure
/// `out` is untouched and the status says what went wrong.
#[no_mangle]
pub extern "C" fn falldef_model_load(
    path: *const c_char,
    out: *mut *mut FalldefModel,
) -> FalldefStatus {
    guarded(|| {
        clear_error();
        if path.is_null() || out.is_null() {
            set_error("path and out must be non-null".to_string());
            return FalldefStatus::NullArgument;
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("path is not valid UTF-8".to_string());
                return FalldefStatus::InvalidPath;
            }
        };
        match load_model(std::path::Path::new(path)) {
            Ok(model) => {
                let handle = Box::new(FalldefModel {
                    inner: Arc::new(model),
                });
                unsafe { *out = Box::into_raw(handle) };
                FalldefStatus::Ok
            }
            Err(e) => {
                let status = status_for(&e);
                set_error(e.to_string());
                status
            }
        }
    })
}

/// Release a model handle. Safe on null. Live streams keep the underlying
/// model alive, so they stay valid after this call.
#[no_mangle]
pub extern "C" fn falldef_model_free(model: *mut FalldefModel) {
    let _ = guarded(|| {
        if !model.is_null() {
            drop(unsafe { Box::from_raw(model) });
        }
        FalldefStatus::Ok
    });
}

/// Samples per classification window. Returns 0 if `model` is null.
#[no_mangle]
pub extern "C" fn falldef_model_window_size(model: *const FalldefModel) -> usize {
    if model.is_null() {
        return 0;
    }
    unsafe { &*model }.inner.window_size
}

/// Classify one complete window.
///
/// `samples` points at `sample_count` interleaved triples
/// `ax0, ay0, az0, ax1, ...` (so `3 * sample_count` doubles), and
/// `sample_count` must equal [`falldef_model_window_size`]. On `Ok`,
/// `*is_fall` is 1 or 0 and `*p_fall` is the fall probability; either
/// out-pointer may be null if the caller does not need it.
#[no_mangle]
pub extern "C" fn falldef_model_classify(
    model: *const FalldefModel,
    samples: *const f64,
    sample_count: usize,
    is_fall: *mut c_int,
    p_fall: *mut f64,
) -> FalldefStatus {
    guarded(|| {
        clear_error();
        if model.is_null() || samples.is_null() {
            set_error("model and samples must be non-null".to_string());
            return FalldefStatus::NullArgument;
        }
        let model = &unsafe { &*model }.inner;
        if sample_count != model.window_size {
            set_error(format!(
                "window has {sample_count} samples but the model expects {}",
                model.window_size
            ));
            return FalldefStatus::BadWindow;
        }
        let flat = unsafe { std::slice::from_raw_parts(samples, sample_count * 3) };
        let window: Vec<[f64; 3]> = flat
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        classify(model, &window, is_fall, p_fall)
    })
}

/// Create a sliding-window stream over `model`, initially empty.
#[no_mangle]
pub extern "C" fn falldef_stream_new(
    model: *const FalldefModel,
    out: *mut *mut FalldefStream,
) -> FalldefStatus {
    guarded(|| {
        clear_error();
        if model.is_null() || out.is_null() {
            set_error("model and out must be non-null".to_string());
            return FalldefStatus::NullArgument;
        }
        let model = unsafe { &*model }.inner.clone();
        let capacity = model.window_size;
        let handle = Box::new(FalldefStream {
            model,
            window: VecDeque::with_capacity(capacity),
        });
        unsafe { *out = Box::into_raw(handle) };
        FalldefStatus::Ok
    })
}

/// Push one sample and classify when a full window is available.
///
/// Returns `Buffering` until `window_size` samples have arrived; after that
/// every push classifies the newest window and returns `Ok` (or an error,
/// which leaves the buffered samples intact). Out-pointers behave as in
/// [`falldef_model_classify`].
#[no_mangle]
pub extern "C" fn falldef_stream_push(
    stream: *mut FalldefStream,
    ax: f64,
    ay: f64,
    az: f64,
    is_fall: *mut c_int,
    p_fall: *mut f64,
) -> FalldefStatus {
    guarded(|| {
        clear_error();
        if stream.is_null() {
            set_error("stream must be non-null".to_string());
            return FalldefStatus::NullArgument;
        }
        if ![ax, ay, az].iter().all(|v| v.is_finite()) {
            set_error("sample values must be finite".to_string());
            return FalldefStatus::Numeric;
        }
        let stream = unsafe { &mut *stream };
        if stream.window.len() == stream.model.window_size {
            stream.window.pop_front();
        }
        stream.window.push_back([ax, ay, az]);
        if stream.window.len() < stream.model.window_size {
            return FalldefStatus::Buffering;
        }
        let window: Vec<[f64; 3]> = stream.window.iter().copied().collect();
        classify(&stream.model, &window, is_fall, p_fall)
    })
}

/// Drop all buffered samples, e.g. after a gap in the source.
#[no_mangle]
pub extern "C" fn falldef_stream_reset(stream: *mut FalldefStream) {
    let _ = guarded(|| {
        if !stream.is_null() {
            unsafe { &mut *stream }.window.clear();
        }
        FalldefStatus::Ok
    });
}

/// Release a stream handle. Safe on null.
#[no_mangle]
pub extern "C" fn falldef_stream_free(stream: *mut FalldefStream) {
    let _ = guarded(|| {
        if !stream.is_null() {
            drop(unsafe { Box::from_raw(stream) });
        }
        FalldefStatus::Ok
    });
}

/// Message for the most recent failure on the calling thread, or null if
/// the last call succeeded. The pointer stays valid until the next falldef
/// call on this thread; do not free it.
#[no_mangle]
pub extern "C" fn falldef_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(msg) => msg.as_ptr(),
        None => std::ptr::null(),
    })
}

/// Library version as a static string; do not free it.
#[no_mangle]
pub extern "C" fn falldef_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
