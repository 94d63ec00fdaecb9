//! C ABI over the pairdet detector. Every function returns a `PdStatus`
//! code; on failure a thread-local message is available through
//! `pd_last_error_message`. The detector handle is opaque and must be
//! released with `pd_detector_close`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};

use pairdet::cli::{cmd_evaluate, load_toml_config, EvaluateArgs};
use pairdet::dataset;
use pairdet::model::{predict, Checkpoint, Detector, PredictOptions};
use pairdet::pipeline::{train, TrainConfig};
use pairdet::synthdata::{generate_dataset, SynthConfig};
use pairdet::Error;

/// Result code of every C-ABI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdStatus {
    Ok = 0,
    /// A bad argument or inconsistent configuration.
    Invalid = 1,
    /// The filesystem said no.
    Io = 2,
    /// Training or inference failed at runtime.
    Runtime = 3,
}

/// One detection: box corners in image pixels, confidence, class id.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PdDetection {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub score: f64,
    pub class_id: u32,
}

/// Opaque handle to a loaded detector.
pub struct PdDetector {
    checkpoint: Checkpoint,
    detector: Detector,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(err: &Error) -> PdStatus {
    set_error(&err.to_string());
    match err {
        Error::Io { .. } => PdStatus::Io,
        Error::NonFiniteLoss { .. } => PdStatus::Runtime,
        _ => PdStatus::Invalid,
    }
}

fn invalid(msg: &str) -> PdStatus {
    set_error(msg);
    PdStatus::Invalid
}

/// # Safety
/// `s` must be a valid NUL-terminated string or null.
unsafe fn path_arg(s: *const c_char, what: &str) -> Result<PathBuf, PdStatus> {
    if s.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    match CStr::from_ptr(s).to_str() {
        Ok(v) => Ok(PathBuf::from(v)),
        Err(_) => Err(invalid(&format!("{what} is not valid UTF-8"))),
    }
}

fn load_train_config(config_path: Option<&Path>) -> Result<TrainConfig, PdStatus> {
    match config_path {
        None => Ok(TrainConfig::default()),
        Some(path) => load_toml_config(path).map_err(|e| fail(&e)),
    }
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Generate the synthetic dataset (images plus train/test manifests)
/// under `out_dir` with the given seed.
///
/// # Safety
/// `out_dir` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pd_generate(out_dir: *const c_char, seed: u64) -> PdStatus {
    let out = match path_arg(out_dir, "out_dir") {
        Ok(p) => p,
        Err(s) => return s,
    };
    let cfg = SynthConfig {
        seed,
        ..Default::default()
    };
    match generate_dataset(&cfg, &out) {
        Ok(_) => PdStatus::Ok,
        Err(e) => fail(&e),
    }
}

/// Train a detector. `config_toml` may be null for the default
/// configuration; `seed` and `iterations` override the configuration when
/// non-negative. The two `disable_*` flags zero the corresponding loss
/// weights.
///
/// # Safety
/// All pointer arguments must be valid NUL-terminated strings (or null
/// where documented).
#[no_mangle]
pub unsafe extern "C" fn pd_train(
    manifest: *const c_char,
    out_dir: *const c_char,
    config_toml: *const c_char,
    seed: i64,
    iterations: i64,
    disable_tlloss: bool,
    disable_simloss: bool,
) -> PdStatus {
    let manifest = match path_arg(manifest, "manifest") {
        Ok(p) => p,
        Err(s) => return s,
    };
    let out = match path_arg(out_dir, "out_dir") {
        Ok(p) => p,
        Err(s) => return s,
    };
    let config_path = if config_toml.is_null() {
        None
    } else {
        match path_arg(config_toml, "config_toml") {
            Ok(p) => Some(p),
            Err(s) => return s,
        }
    };
    let mut cfg = match load_train_config(config_path.as_deref()) {
        Ok(c) => c,
        Err(s) => return s,
    };
    if seed >= 0 {
        cfg.seed = seed as u64;
    }
    if iterations >= 0 {
        cfg.iterations = iterations as u64;
    }
    if disable_tlloss {
        cfg.weights.lambda2 = 0.0;
    }
    if disable_simloss {
        cfg.weights.lambda4 = 0.0;
    }
    match train(&cfg, &manifest, &out, None) {
        Ok(_) => PdStatus::Ok,
        Err(e) => fail(&e),
    }
}

/// Evaluate a checkpoint against a manifest, writing report.json and
/// roc.csv under `out_dir`.
///
/// # Safety
/// All pointer arguments must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn pd_evaluate(
    checkpoint: *const c_char,
    manifest: *const c_char,
    out_dir: *const c_char,
) -> PdStatus {
    let args = EvaluateArgs {
        checkpoint: match path_arg(checkpoint, "checkpoint") {
            Ok(p) => p,
            Err(s) => return s,
        },
        manifest: match path_arg(manifest, "manifest") {
            Ok(p) => p,
            Err(s) => return s,
        },
        out: match path_arg(out_dir, "out_dir") {
            Ok(p) => p,
            Err(s) => return s,
        },
    };
    match cmd_evaluate(&args) {
        Ok(_) => PdStatus::Ok,
        Err(e) => fail(&e),
    }
}

/// Load a detector from a checkpoint file. On success `*out` owns the
/// handle; release it with `pd_detector_close`.
///
/// # Safety
/// `checkpoint` must be a valid NUL-terminated string and `out` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn pd_detector_open(
    checkpoint: *const c_char,
    out: *mut *mut PdDetector,
) -> PdStatus {
    if out.is_null() {
        return invalid("out is null");
    }
    let path = match path_arg(checkpoint, "checkpoint") {
        Ok(p) => p,
        Err(s) => return s,
    };
    match Checkpoint::load(&path) {
        Ok(ck) => {
            let detector = Detector {
                config: ck.model.clone(),
                params: ck.params.clone(),
            };
            *out = Box::into_raw(Box::new(PdDetector {
                checkpoint: ck,
                detector,
            }));
            PdStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Release a detector handle. Null is a no-op.
///
/// # Safety
/// `handle` must come from `pd_detector_open` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pd_detector_close(handle: *mut PdDetector) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Run detection on a grayscale PNG. Up to `cap` detections are written
/// to `out` in descending score order; `*out_count` receives the number
/// written.
///
/// # Safety
/// `handle` must be a live handle, `image_path` a valid NUL-terminated
/// string, `out` an array of at least `cap` entries, and `out_count` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pd_detector_detect(
    handle: *const PdDetector,
    image_path: *const c_char,
    out: *mut PdDetection,
    cap: usize,
    out_count: *mut usize,
) -> PdStatus {
    if handle.is_null() {
        return invalid("handle is null");
    }
    if out_count.is_null() || (out.is_null() && cap > 0) {
        return invalid("output buffer is null");
    }
    let path = match path_arg(image_path, "image_path") {
        Ok(p) => p,
        Err(s) => return s,
    };
    let h = &*handle;
    let image = match dataset::load_image(&path) {
        Ok(t) => t,
        Err(e) => return fail(&e),
    };
    let detections = match predict(
        &h.detector,
        &h.checkpoint.anchors,
        &image,
        &PredictOptions::default(),
    ) {
        Ok(d) => d,
        Err(e) => return fail(&e),
    };
    let n = detections.len().min(cap);
    for (i, d) in detections.iter().take(n).enumerate() {
        *out.add(i) = PdDetection {
            x_min: d.bbox.x_min,
            y_min: d.bbox.y_min,
            x_max: d.bbox.x_max,
            y_max: d.bbox.y_max,
            score: d.score,
            class_id: d.class_id as u32,
        };
    }
    *out_count = n;
    PdStatus::Ok
}
