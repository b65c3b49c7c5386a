//! C ABI over the `fapnet` crate.
//!
//! Every fallible function returns a [`FapnetStatus`]. On failure the message
//! is kept per thread and can be read with [`fapnet_last_error_message`].
//! Panics never cross the boundary; they are reported as
//! `FAPNET_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fapnet::archive::Archive;
use fapnet::checkpoint::{model_from_archive, training_input_size};
use fapnet::data::extract_edge_gt;
use fapnet::metrics::{evaluate_pair, EvalPair, MetricConfig};
use fapnet::network::Model;
use fapnet::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FapnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Runtime = 5,
    Panic = 6,
}

/// Scalar metrics of one prediction/ground-truth pair.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FapnetMetrics {
    pub s_alpha: f64,
    pub e_phi_mean: f64,
    pub f_beta_mean: f64,
    pub f_beta_max: f64,
    pub mae: f64,
}

/// Opaque model handle.
pub struct FapnetModel {
    model: Model,
    input_size: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

type Failure = (FapnetStatus, String);

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FapnetStatus {
    match e {
        Error::Contract(_) | Error::Config { .. } | Error::NoPairs(_) | Error::ConfigMismatch { .. } => FapnetStatus::InvalidArgument,
        Error::Io { .. } => FapnetStatus::Io,
        Error::Image { .. } | Error::Archive { .. } | Error::ShapeMismatch { .. } | Error::MissingParameter(_) => FapnetStatus::Format,
        Error::NonFiniteLoss { .. } => FapnetStatus::Runtime,
    }
}

fn lift(e: Error) -> Failure {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> Failure {
    (FapnetStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FapnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FapnetStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FapnetStatus::Panic
        }
    }
}

fn plane_len(width: usize, height: usize, channels: usize) -> Result<usize, Failure> {
    if width == 0 || height == 0 {
        return Err((FapnetStatus::InvalidArgument, "width and height must be positive".into()));
    }
    width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| (FapnetStatus::InvalidArgument, "image dimensions overflow".into()))
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fapnet_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fapnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a training checkpoint. On success `*out` receives a handle that
/// must be released with [`fapnet_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn fapnet_model_load(path: *const c_char, out: *mut *mut FapnetModel) -> FapnetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (FapnetStatus::InvalidArgument, "path is not valid UTF-8".to_string()))?;
        let path = Path::new(path);
        let archive = Archive::load(path).map_err(lift)?;
        let model = model_from_archive(&archive, path).map_err(lift)?;
        let input_size = training_input_size(&archive).unwrap_or(352);
        *out = Box::into_raw(Box::new(FapnetModel { model, input_size }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from [`fapnet_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fapnet_model_free(model: *mut FapnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Network input resolution used by [`fapnet_model_predict`], or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fapnet_model_input_size(model: *const FapnetModel) -> usize {
    model.as_ref().map_or(0, |m| m.input_size)
}

/// Predicts a saliency map for an interleaved RGB image (`height` rows of
/// `width * 3` bytes). `out_map` receives `width * height` values in `[0, 1]`.
///
/// # Safety
/// `rgb` must point to `width * height * 3` readable bytes and `out_map` to
/// `width * height` writable floats.
#[no_mangle]
pub unsafe extern "C" fn fapnet_model_predict(
    model: *const FapnetModel,
    rgb: *const u8,
    width: usize,
    height: usize,
    out_map: *mut f32,
) -> FapnetStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if out_map.is_null() {
            return Err(null("out_map"));
        }
        let n = plane_len(width, height, 1)?;
        let src = std::slice::from_raw_parts(rgb, plane_len(width, height, 3)?);
        let mut planar = vec![0.0; 3 * n];
        for (i, px) in src.chunks_exact(3).enumerate() {
            for c in 0..3 {
                planar[c * n + i] = px[c] as f64 / 255.0;
            }
        }
        let image = Tensor::from_vec(&[1, 3, height, width], planar).map_err(lift)?;
        let pred = m.model.predict(&image, m.input_size, None).map_err(lift)?;
        let dst = std::slice::from_raw_parts_mut(out_map, n);
        for (d, &v) in dst.iter_mut().zip(pred.map.data()) {
            *d = v as f32;
        }
        Ok(())
    })
}

/// Scores a prediction (`width * height` floats, min-max normalized when
/// outside `[0, 1]`) against a mask (`width * height` bytes, foreground >= 128)
/// with the default metric settings.
///
/// # Safety
/// `pred` and `gt` must point to `width * height` readable elements and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fapnet_eval_pair(
    pred: *const f32,
    gt: *const u8,
    width: usize,
    height: usize,
    out: *mut FapnetMetrics,
) -> FapnetStatus {
    guard(|| {
        if pred.is_null() {
            return Err(null("pred"));
        }
        if gt.is_null() {
            return Err(null("gt"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let n = plane_len(width, height, 1)?;
        let p: Vec<f64> = std::slice::from_raw_parts(pred, n).iter().map(|&v| v as f64).collect();
        if p.iter().any(|v| !v.is_finite()) {
            return Err((FapnetStatus::InvalidArgument, "prediction contains non-finite values".into()));
        }
        let g: Vec<f64> = std::slice::from_raw_parts(gt, n).iter().map(|&v| v as f64 / 255.0).collect();
        let pt = Tensor::from_vec(&[height, width], p).map_err(lift)?;
        let gtt = Tensor::from_vec(&[height, width], g).map_err(lift)?;
        let pair = EvalPair::normalized(&pt, &gtt).map_err(lift)?;
        let m = evaluate_pair(&pair, &MetricConfig::default());
        *out = FapnetMetrics {
            s_alpha: m.s_alpha,
            e_phi_mean: m.e.mean,
            f_beta_mean: m.f.mean,
            f_beta_max: m.f.max,
            mae: m.mae,
        };
        Ok(())
    })
}

/// One-pixel boundary of a binary mask (foreground >= 128). `out_edge`
/// receives 1 on boundary pixels and 0 elsewhere.
///
/// # Safety
/// `mask` must point to `width * height` readable bytes and `out_edge` to as many writable bytes.
#[no_mangle]
pub unsafe extern "C" fn fapnet_extract_edge(mask: *const u8, width: usize, height: usize, out_edge: *mut u8) -> FapnetStatus {
    guard(|| {
        if mask.is_null() {
            return Err(null("mask"));
        }
        if out_edge.is_null() {
            return Err(null("out_edge"));
        }
        let n = plane_len(width, height, 1)?;
        let m: Vec<f64> = std::slice::from_raw_parts(mask, n).iter().map(|&v| (v >= 128) as u8 as f64).collect();
        let edge = extract_edge_gt(&Tensor::from_vec(&[height, width], m).map_err(lift)?).map_err(lift)?;
        let dst = std::slice::from_raw_parts_mut(out_edge, n);
        for (d, &v) in dst.iter_mut().zip(edge.data()) {
            *d = v as u8;
        }
        Ok(())
    })
}
