//! C ABI over the gazeguide core: gaze-only box extraction, Hungarian
//! matching and detector inference from a checkpoint.
//!
//! Every fallible function returns a [`GgStatus`]; on failure the message is
//! available from [`gg_last_error_message`] on the same thread. Handles are
//! opaque and owned by the caller until passed to their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use gazeguide::gaze::{process_gaze, GazeParams, GazePoint};
use gazeguide::harness::load_checkpoint;
use gazeguide::image::GrayImage;
use gazeguide::matching::hungarian_match;
use gazeguide::matrix::Matrix;
use gazeguide::model::{Detector, ModelConfig};
use gazeguide::{BoundingBox, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    InvalidConfig = 3,
    Io = 4,
    NonFinite = 5,
    OutOfRange = 6,
    Panic = 7,
}

/// Normalized box: center and size as fractions of the image side.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GgBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GgGazePoint {
    pub t_ms: f64,
    pub x_px: f64,
    pub y_px: f64,
    pub dur_ms: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GgGazeParams {
    pub sigma_px: f64,
    pub tau_rel: f64,
    pub min_area_px: usize,
    pub overlap_tau: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GgDetection {
    pub bbox: GgBox,
    pub score: f64,
}

pub struct GgBoxList(Vec<GgBox>);

pub struct GgDetectionList(Vec<GgDetection>);

pub struct GgDetector(Detector<f32>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> GgStatus {
    match err {
        Error::InvalidBox { .. } | Error::InvalidInput(_) => GgStatus::InvalidInput,
        Error::Config(_) => GgStatus::InvalidConfig,
        Error::File { .. } | Error::Io(_) => GgStatus::Io,
        Error::NonFiniteLoss { .. } => GgStatus::NonFinite,
    }
}

struct Fail(GgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(GgStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GgStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GgStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal error: {msg}"));
            GgStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null (only when `n == 0`) or point to `n` readable values.
unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        Ok(&[])
    } else if p.is_null() {
        Err(null(what))
    } else {
        Ok(std::slice::from_raw_parts(p, n))
    }
}

fn to_box(b: &GgBox) -> Result<BoundingBox, Fail> {
    Ok(BoundingBox::new(b.cx, b.cy, b.w, b.h)?)
}

fn from_box(b: &BoundingBox) -> GgBox {
    GgBox {
        cx: b.cx(),
        cy: b.cy(),
        w: b.w(),
        h: b.h(),
    }
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn gg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default gaze-processing parameters.
#[no_mangle]
pub extern "C" fn gg_gaze_params_default() -> GgGazeParams {
    let p = GazeParams::default();
    GgGazeParams {
        sigma_px: p.sigma_px,
        tau_rel: p.tau_rel,
        min_area_px: p.min_area_px,
        overlap_tau: p.overlap_tau,
    }
}

/// Gaze-only boxes for one image: heatmap, threshold, components, and removal
/// of regions overlapping a candida annotation. `params` may be null for the
/// defaults. On success `*out` owns a new list.
///
/// # Safety
/// Array arguments must hold the stated number of elements; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn gg_process_gaze(
    trace: *const GgGazePoint,
    n_trace: usize,
    candida: *const GgBox,
    n_candida: usize,
    params: *const GgGazeParams,
    height: usize,
    width: usize,
    out: *mut *mut GgBoxList,
) -> GgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let trace: Vec<GazePoint> = slice(trace, n_trace, "trace")?
            .iter()
            .map(|g| GazePoint {
                t_ms: g.t_ms,
                x_px: g.x_px,
                y_px: g.y_px,
                dur_ms: g.dur_ms,
            })
            .collect();
        let candida: Vec<BoundingBox> = slice(candida, n_candida, "candida")?
            .iter()
            .map(to_box)
            .collect::<Result<_, _>>()?;
        let params = if params.is_null() {
            GazeParams::default()
        } else {
            let p = &*params;
            GazeParams {
                sigma_px: p.sigma_px,
                tau_rel: p.tau_rel,
                min_area_px: p.min_area_px,
                overlap_tau: p.overlap_tau,
            }
        };
        let boxes = process_gaze(&trace, &candida, &params, height, width)?;
        let list = GgBoxList(boxes.iter().map(|l| from_box(&l.bbox)).collect());
        *out = Box::into_raw(Box::new(list));
        Ok(())
    })
}

/// Number of boxes in `list` (0 for null).
///
/// # Safety
/// `list` must be null or a live list.
#[no_mangle]
pub unsafe extern "C" fn gg_box_list_len(list: *const GgBoxList) -> usize {
    list.as_ref().map_or(0, |l| l.0.len())
}

/// # Safety
/// `list` must be null or a live list; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gg_box_list_get(list: *const GgBoxList, index: usize, out: *mut GgBox) -> GgStatus {
    guard(|| {
        let l = list.as_ref().ok_or_else(|| null("list"))?;
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        *o = *l.0.get(index).ok_or_else(|| {
            Fail(GgStatus::OutOfRange, format!("index {index} out of range for {} boxes", l.0.len()))
        })?;
        Ok(())
    })
}

/// # Safety
/// `list` must be null or a list not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gg_box_list_free(list: *mut GgBoxList) {
    if !list.is_null() {
        drop(Box::from_raw(list));
    }
}

/// Minimum-cost assignment on a row-major `rows x cols` matrix. Writes
/// `min(rows, cols)` pairs, sorted by row, into `out_rows`/`out_cols`
/// (each with room for that many) and the count into `*out_len`.
///
/// # Safety
/// `cost` must hold `rows * cols` values; output buffers must be writable.
#[no_mangle]
pub unsafe extern "C" fn gg_hungarian(
    cost: *const f64,
    rows: usize,
    cols: usize,
    out_rows: *mut usize,
    out_cols: *mut usize,
    out_len: *mut usize,
) -> GgStatus {
    guard(|| {
        let len = out_len.as_mut().ok_or_else(|| null("out_len"))?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Fail(GgStatus::InvalidInput, "matrix size overflows".into()))?;
        let data = slice(cost, n, "cost")?;
        let m = Matrix::from_fn(rows, cols, |i, j| data[i * cols + j]);
        let a = hungarian_match(&m)?;
        if !a.pairs.is_empty() && (out_rows.is_null() || out_cols.is_null()) {
            return Err(null("output buffer"));
        }
        for (k, &(i, j)) in a.pairs.iter().enumerate() {
            *out_rows.add(k) = i;
            *out_cols.add(k) = j;
        }
        *len = a.pairs.len();
        Ok(())
    })
}

/// Loads a checkpoint directory (`params.bin` + `meta.json`).
///
/// # Safety
/// `dir` must be a NUL-terminated UTF-8 path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gg_detector_load(dir: *const c_char, out: *mut *mut GgDetector) -> GgStatus {
    guard(|| {
        if dir.is_null() {
            return Err(null("dir"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(dir)
            .to_str()
            .map_err(|_| Fail(GgStatus::InvalidInput, "path is not UTF-8".into()))?;
        let (model, _) = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(GgDetector(model)));
        Ok(())
    })
}

/// An untrained detector with the default configuration.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gg_detector_new_default(seed: u64, out: *mut *mut GgDetector) -> GgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = Detector::new(ModelConfig::default(), seed)?;
        *out = Box::into_raw(Box::new(GgDetector(model)));
        Ok(())
    })
}

/// # Safety
/// `det` must be null or a detector not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gg_detector_free(det: *mut GgDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Candida detections scoring at least `conf_threshold` on an 8-bit
/// grayscale image (row-major, `width * height` bytes), highest score first.
///
/// # Safety
/// `det` must be a live detector, `pixels` must hold `width * height` bytes
/// and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gg_detector_predict(
    det: *const GgDetector,
    pixels: *const u8,
    width: usize,
    height: usize,
    conf_threshold: f64,
    out: *mut *mut GgDetectionList,
) -> GgStatus {
    guard(|| {
        let d = det.as_ref().ok_or_else(|| null("detector"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let n = width
            .checked_mul(height)
            .ok_or_else(|| Fail(GgStatus::InvalidInput, "image size overflows".into()))?;
        let img = GrayImage::new(width, height, slice(pixels, n, "pixels")?.to_vec())?;
        let dets = d.0.predict(&img, conf_threshold)?;
        let list = dets
            .iter()
            .map(|x| GgDetection {
                bbox: from_box(&x.bbox),
                score: x.score,
            })
            .collect();
        *out = Box::into_raw(Box::new(GgDetectionList(list)));
        Ok(())
    })
}

/// # Safety
/// `list` must be null or a live list.
#[no_mangle]
pub unsafe extern "C" fn gg_detection_list_len(list: *const GgDetectionList) -> usize {
    list.as_ref().map_or(0, |l| l.0.len())
}

/// # Safety
/// `list` must be null or a live list; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gg_detection_list_get(list: *const GgDetectionList, index: usize, out: *mut GgDetection) -> GgStatus {
    guard(|| {
        let l = list.as_ref().ok_or_else(|| null("list"))?;
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        *o = *l.0.get(index).ok_or_else(|| {
            Fail(GgStatus::OutOfRange, format!("index {index} out of range for {} detections", l.0.len()))
        })?;
        Ok(())
    })
}

/// # Safety
/// `list` must be null or a list not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gg_detection_list_free(list: *mut GgDetectionList) {
    if !list.is_null() {
        drop(Box::from_raw(list));
    }
}
