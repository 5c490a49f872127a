//! C ABI over the udalm library.
//!
//! Every fallible function returns a [`UdalmStatus`]. On failure a message is
//! stored per thread and can be read with [`udalm_last_error_message`].
//! Models are opaque handles created by [`udalm_model_load`] and released
//! with [`udalm_model_free`]. All arrays are caller-allocated and row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use udalm::adaptation::{select, PseudoLabelRecord, SelectionMode};
use udalm::checkpoint::Checkpoint;
use udalm::data::{Domain, ImageSample};
use udalm::evaluation::{aggregate, predict_samples, radial_errors, MreMode};
use udalm::model::Model;
use udalm::objectives::LandmarkMask;
use udalm::tensor::Tensor;
use udalm::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UdalmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Input = 5,
    Internal = 6,
}

/// Opaque model handle.
pub struct UdalmModel {
    model: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("no interior nul")));
}

fn status_of(e: &Error) -> UdalmStatus {
    match e {
        Error::Io { .. } => UdalmStatus::Io,
        Error::Checkpoint(_) => UdalmStatus::Checkpoint,
        Error::Input(_) | Error::Load { .. } => UdalmStatus::Input,
        Error::Config(_) | Error::Schema { .. } => UdalmStatus::InvalidArgument,
        Error::Format(_) => UdalmStatus::Internal,
    }
}

struct Failure(UdalmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(UdalmStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(UdalmStatus::InvalidArgument, msg.into())
}

/// Runs `f`, records any failure and converts panics into `Internal`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> UdalmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            UdalmStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            UdalmStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

fn pairs(flat: &[f64]) -> Vec<[f64; 2]> {
    flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn udalm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint and stores a new handle in `*out`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn udalm_model_load(path: *const c_char, out: *mut *mut UdalmModel) -> UdalmStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not valid UTF-8"))?;
        let ck = Checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(UdalmModel { model: ck.model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`udalm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn udalm_model_free(model: *mut UdalmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of landmarks the model predicts, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn udalm_model_num_landmarks(model: *const UdalmModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().num_landmarks)
}

/// Network input size in pixels.
///
/// # Safety
/// `model` must be a live handle; `width` and `height` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn udalm_model_input_size(
    model: *const UdalmModel,
    width: *mut usize,
    height: *mut usize,
) -> UdalmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if width.is_null() || height.is_null() {
            return Err(null("width/height"));
        }
        let [w, h] = m.model.config().input_size;
        *width = w;
        *height = h;
        Ok(())
    })
}

/// Predicts landmarks on a grayscale image of any size with values in `[0, 1]`.
///
/// The image is resized to the input size and predictions are mapped back to
/// its pixel coordinates. Writes `L` `(x, y)` pairs to `coords` (length `2L`)
/// and `L` confidences to `confidences`.
///
/// # Safety
/// `pixels` must hold `width·height` floats; output buffers must have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn udalm_model_predict(
    model: *const UdalmModel,
    pixels: *const f32,
    width: usize,
    height: usize,
    coords: *mut f64,
    confidences: *mut f64,
) -> UdalmStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if width == 0 || height == 0 {
            return Err(invalid("image size must be positive"));
        }
        let l = m.config().num_landmarks;
        let px = slice(pixels, width * height, "pixels")?;
        let coords = slice_mut(coords, 2 * l, "coords")?;
        let confidences = slice_mut(confidences, l, "confidences")?;
        let sample = ImageSample {
            id: "ffi".into(),
            pixels: Tensor::from_vec(&[height, width], px.to_vec()),
            original_size: [width, height],
            spacing_mm: [1.0, 1.0],
            landmarks: None,
            domain: Domain::Target,
            subdomain: None,
        };
        let pred = predict_samples(m, std::slice::from_ref(&sample))?.remove(0);
        for (dst, p) in coords.chunks_exact_mut(2).zip(&pred.coords) {
            dst.copy_from_slice(p);
        }
        confidences.copy_from_slice(&pred.confidences);
        Ok(())
    })
}

/// Landmark-aware selection on an `M×L` confidence table.
///
/// Each landmark keeps its `max(1, floor(ratio·M))` most confident images
/// (ties go to the lower row index). Writes `L` thresholds and an `M×L`
/// 0/1 mask.
///
/// # Safety
/// `confidences` and `mask` must hold `M·L` entries, `thresholds` `L`.
#[no_mangle]
pub unsafe extern "C" fn udalm_dynamic_thresholds(
    confidences: *const f64,
    m: usize,
    l: usize,
    ratio: f64,
    thresholds: *mut f64,
    mask: *mut u8,
) -> UdalmStatus {
    guard(|| {
        if m == 0 || l == 0 {
            return Err(invalid("confidence table must be non-empty"));
        }
        let conf = slice(confidences, m * l, "confidences")?;
        let thresholds = slice_mut(thresholds, l, "thresholds")?;
        let mask = slice_mut(mask, m * l, "mask")?;
        let mut records: Vec<PseudoLabelRecord> = conf
            .chunks_exact(l)
            .enumerate()
            .map(|(i, row)| PseudoLabelRecord {
                // Zero padding makes id order equal row order.
                image_id: format!("{i:020}"),
                round: 0,
                coords: vec![[0.0, 0.0]; l],
                confidences: row.to_vec(),
                mask: LandmarkMask::zeros(l),
            })
            .collect();
        let t = select(&mut records, ratio, SelectionMode::Dynamic)?;
        thresholds.copy_from_slice(&t);
        for (row, rec) in mask.chunks_exact_mut(l).zip(&records) {
            for (dst, &on) in row.iter_mut().zip(&rec.mask.0) {
                *dst = on as u8;
            }
        }
        Ok(())
    })
}

/// Per-landmark radial errors in millimetres for `L` landmarks.
///
/// # Safety
/// `pred` and `gt` must hold `2L` values, `out` `L`.
#[no_mangle]
pub unsafe extern "C" fn udalm_radial_errors(
    pred: *const f64,
    gt: *const f64,
    l: usize,
    spacing_x: f64,
    spacing_y: f64,
    out: *mut f64,
) -> UdalmStatus {
    guard(|| {
        if !(spacing_x > 0.0 && spacing_y > 0.0) {
            return Err(invalid("spacing must be positive"));
        }
        let pred = pairs(slice(pred, 2 * l, "pred")?);
        let gt = pairs(slice(gt, 2 * l, "gt")?);
        let out = slice_mut(out, l, "out")?;
        out.copy_from_slice(&radial_errors(&pred, &gt, [spacing_x, spacing_y]));
        Ok(())
    })
}

/// Pooled MRE and SDR (percent, boundary inclusive) over an `N×L` error table.
///
/// # Safety
/// `errors` must hold `N·L` values, `radii` and `sdr` `n_radii`, `mre` one.
#[no_mangle]
pub unsafe extern "C" fn udalm_aggregate(
    errors: *const f64,
    n_images: usize,
    l: usize,
    radii: *const f64,
    n_radii: usize,
    mre: *mut f64,
    sdr: *mut f64,
) -> UdalmStatus {
    guard(|| {
        if n_images == 0 || l == 0 {
            return Err(invalid("error table must be non-empty"));
        }
        let errors: Vec<Vec<f64>> = slice(errors, n_images * l, "errors")?.chunks_exact(l).map(<[f64]>::to_vec).collect();
        let radii = slice(radii, n_radii, "radii")?;
        let sdr = slice_mut(sdr, n_radii, "sdr")?;
        if mre.is_null() {
            return Err(null("mre"));
        }
        let report = aggregate(&errors, radii, MreMode::Pooled)?;
        *mre = report.mre_mm;
        for (dst, s) in sdr.iter_mut().zip(&report.sdr) {
            *dst = s.rate;
        }
        Ok(())
    })
}
