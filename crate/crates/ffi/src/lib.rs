//! C interface to the benchmark. Every object is an opaque handle created by
//! a `pb_*` constructor and released with the matching `*_free`. Functions
//! return a [`PbStatus`]; on failure `pb_last_error` describes the error on
//! the calling thread. Pointer arguments must be null or valid for the
//! access the function documents.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use pegbench::bench::Bench;
use pegbench::collector::{read_dataset, write_dataset, Dataset};
use pegbench::config::BenchConfig;
use pegbench::error::{Error, FormatError};
use pegbench::regressor::{load_params, save_params, ModelParams};
use pegbench::sensors::{ImageTensor, WrenchReading};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Runtime = 6,
    Panic = 7,
}

pub struct PbConfig(BenchConfig);
pub struct PbDataset(Dataset);
pub struct PbParams(ModelParams);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> PbStatus {
    match e {
        Error::Config(_) | Error::Geometry(_) => PbStatus::Config,
        Error::Io(_) | Error::Format(FormatError::Io(_)) => PbStatus::Io,
        Error::Format(_) => PbStatus::Format,
        _ => PbStatus::Runtime,
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), (PbStatus, String)>) -> PbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PbStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            PbStatus::Panic
        }
    }
}

fn lift<T>(r: Result<T, impl Into<Error>>) -> Result<T, (PbStatus, String)> {
    r.map_err(|e| {
        let e = e.into();
        (status_of(&e), e.to_string())
    })
}

fn null(what: &str) -> (PbStatus, String) {
    (PbStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (PbStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (PbStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut *mut T) -> Result<&'a mut *mut T, (PbStatus, String)> {
    p.as_mut().ok_or_else(|| null("output pointer"))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, (PbStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failure on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub unsafe extern "C" fn pb_config_default(out: *mut *mut PbConfig) -> PbStatus {
    guard(|| {
        let out = out_arg(out)?;
        *out = Box::into_raw(Box::new(PbConfig(BenchConfig::default())));
        Ok(())
    })
}

/// Parses a JSON config; missing fields take their defaults.
#[no_mangle]
pub unsafe extern "C" fn pb_config_from_json(json: *const c_char, out: *mut *mut PbConfig) -> PbStatus {
    guard(|| {
        let out = out_arg(out)?;
        let cfg = lift(BenchConfig::from_json(str_arg(json, "json")?))?;
        *out = Box::into_raw(Box::new(PbConfig(cfg)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pb_config_load(path: *const c_char, out: *mut *mut PbConfig) -> PbStatus {
    guard(|| {
        let out = out_arg(out)?;
        let cfg = lift(BenchConfig::load(Path::new(str_arg(path, "path")?)))?;
        *out = Box::into_raw(Box::new(PbConfig(cfg)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pb_config_set_seed(cfg: *mut PbConfig, seed: u64) -> PbStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("config"))?;
        cfg.0.seed = seed;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pb_config_free(cfg: *mut PbConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Backward collection on the configured task.
#[no_mangle]
pub unsafe extern "C" fn pb_collect(cfg: *const PbConfig, out: *mut *mut PbDataset) -> PbStatus {
    guard(|| {
        let out = out_arg(out)?;
        let cfg = handle(cfg, "config")?;
        let bench = lift(Bench::new(cfg.0.clone()))?;
        let data = lift(bench.collect(&cfg.0.task))?;
        *out = Box::into_raw(Box::new(PbDataset(data)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pb_dataset_len(data: *const PbDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.len())
}

#[no_mangle]
pub unsafe extern "C" fn pb_dataset_save(data: *const PbDataset, path: *const c_char) -> PbStatus {
    guard(|| {
        let data = handle(data, "dataset")?;
        lift(write_dataset(&data.0, Path::new(str_arg(path, "path")?)))
    })
}

#[no_mangle]
pub unsafe extern "C" fn pb_dataset_load(path: *const c_char, out: *mut *mut PbDataset) -> PbStatus {
    guard(|| {
        let out = out_arg(out)?;
        let data = lift(read_dataset(Path::new(str_arg(path, "path")?)))?;
        *out = Box::into_raw(Box::new(PbDataset(data)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pb_dataset_free(data: *mut PbDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Trains with the configured augmentation and optimizer settings.
#[no_mangle]
pub unsafe extern "C" fn pb_train(cfg: *const PbConfig, data: *const PbDataset, out: *mut *mut PbParams) -> PbStatus {
    guard(|| {
        let out = out_arg(out)?;
        let cfg = handle(cfg, "config")?;
        let data = handle(data, "dataset")?;
        let bench = lift(Bench::new(cfg.0.clone()))?;
        let params = lift(bench.train(&data.0, true))?;
        *out = Box::into_raw(Box::new(PbParams(params)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pb_params_save(params: *const PbParams, path: *const c_char) -> PbStatus {
    guard(|| {
        let p = handle(params, "params")?;
        lift(save_params(&p.0, Path::new(str_arg(path, "path")?)))
    })
}

#[no_mangle]
pub unsafe extern "C" fn pb_params_load(path: *const c_char, out: *mut *mut PbParams) -> PbStatus {
    guard(|| {
        let out = out_arg(out)?;
        let p = lift(load_params(Path::new(str_arg(path, "path")?)))?;
        *out = Box::into_raw(Box::new(PbParams(p)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn pb_params_free(params: *mut PbParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Corrective action `(dx, dy, dθx, dθy, dθz)` for one observation.
/// `image` holds `image_len` values laid out row-major, channels last, and
/// must match the input size the parameters were trained for.
#[no_mangle]
pub unsafe extern "C" fn pb_predict(
    params: *const PbParams,
    image: *const f32,
    image_len: usize,
    wrench: *const f64,
    out: *mut f64,
) -> PbStatus {
    guard(|| {
        let p = handle(params, "params")?;
        if image.is_null() || wrench.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        let a = p.0.arch;
        if image_len != a.height * a.width * a.channels {
            return Err((
                PbStatus::InvalidArgument,
                format!("image has {image_len} values, expected {}", a.height * a.width * a.channels),
            ));
        }
        let img = ImageTensor {
            height: a.height,
            width: a.width,
            channels: a.channels,
            data: std::slice::from_raw_parts(image, image_len).to_vec(),
        };
        let mut w = [0.0; 6];
        w.copy_from_slice(std::slice::from_raw_parts(wrench, 6));
        let d = lift(p.0.forward(&img, &WrenchReading::from_array(w)))?;
        std::slice::from_raw_parts_mut(out, 5).copy_from_slice(&d.to_array());
        Ok(())
    })
}

/// Evaluation on the configured task; `trials` of 0 uses the configured count.
#[no_mangle]
pub unsafe extern "C" fn pb_eval(
    cfg: *const PbConfig,
    params: *const PbParams,
    trials: usize,
    success_rate: *mut f64,
    mean_duration: *mut f64,
) -> PbStatus {
    guard(|| {
        let cfg = handle(cfg, "config")?;
        let p = handle(params, "params")?;
        if success_rate.is_null() || mean_duration.is_null() {
            return Err(null("output pointer"));
        }
        let mut c = cfg.0.clone();
        if trials > 0 {
            c.eval.trials = trials;
        }
        let bench = lift(Bench::new(c))?;
        let board = lift(bench.cfg.board(&bench.cfg.task))?;
        let s = lift(bench.evaluate(&board, &p.0, bench.cfg.eval.trials))?;
        *success_rate = s.success_rate;
        *mean_duration = s.mean_duration;
        Ok(())
    })
}
