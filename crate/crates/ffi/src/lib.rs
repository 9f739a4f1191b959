//! C ABI over the adaptive pseudo-label controller, the box geometry and a
//! trained detector.
//!
//! Handles are opaque and owned by the caller: every `*_new`/`*_load` has a
//! matching `*_free`. Functions return an [`OwodStatus`]; on failure the
//! message is available from [`owod_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use owodlab::detector::{Detector, DetectorConfig};
use owodlab::geometry::{giou, iou, BoundingBox, Label};
use owodlab::inference::predict;
use owodlab::plm::{fused_score, AdaptiveConfig, AdaptiveState};
use owodlab::protocol::{ClassRegistry, TaskSpec};
use owodlab::raster::RasterImage;
use owodlab::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OwodStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Data = 3,
    Divergence = 4,
    State = 5,
    Io = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

impl From<&Error> for OwodStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) | Error::NoNextTask(_) => OwodStatus::Config,
            Error::Divergence { .. } => OwodStatus::Divergence,
            Error::Io { .. } => OwodStatus::Io,
            Error::InsufficientHistory { .. } | Error::DegenerateDenominator | Error::NonPositiveWeight { .. } => {
                OwodStatus::State
            }
            _ => OwodStatus::Data,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(OwodStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(OwodStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(OwodStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OwodStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OwodStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            OwodStatus::Panic
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn owod_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL. Valid until
/// the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn owod_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Controller hyperparameters. A negative `start` means "equal to `total`".
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct OwodControllerConfig {
    pub recent: usize,
    pub total: usize,
    pub cycle: usize,
    pub start: i64,
    pub pi_pma: f64,
    pub pi_nma: f64,
    pub initial_w_m: f64,
    pub initial_w_i: f64,
}

impl From<&OwodControllerConfig> for AdaptiveConfig {
    fn from(c: &OwodControllerConfig) -> Self {
        AdaptiveConfig {
            recent: c.recent,
            total: c.total,
            cycle: c.cycle,
            start: (c.start >= 0).then_some(c.start as usize),
            pi_pma: c.pi_pma,
            pi_nma: c.pi_nma,
            initial_weights: (c.initial_w_m, c.initial_w_i),
        }
    }
}

/// Opaque adaptive-weight controller.
pub struct OwodController {
    state: AdaptiveState,
}

/// Opaque detector.
pub struct OwodDetector {
    detector: Detector,
}

/// One detection; `class_id` is -1 for "unknown". Corners are normalised.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OwodDetection {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    pub class_id: i32,
}

/// Writes the default hyperparameters into `out`.
///
/// # Safety
/// `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn owod_controller_config_default(out: *mut OwodControllerConfig) -> OwodStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let d = AdaptiveConfig::default();
        *out = OwodControllerConfig {
            recent: d.recent,
            total: d.total,
            cycle: d.cycle,
            start: d.start.map_or(-1, |s| s as i64),
            pi_pma: d.pi_pma,
            pi_nma: d.pi_nma,
            initial_w_m: d.initial_weights.0,
            initial_w_i: d.initial_weights.1,
        };
        Ok(())
    })
}

/// # Safety
/// `config` must point to a valid config; `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn owod_controller_new(
    config: *const OwodControllerConfig,
    out: *mut *mut OwodController,
) -> OwodStatus {
    guard(|| {
        let cfg = unsafe { config.as_ref() }.ok_or_else(|| null("config"))?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let state = AdaptiveState::new(&AdaptiveConfig::from(cfg))?;
        *out = Box::into_raw(Box::new(OwodController { state }));
        Ok(())
    })
}

/// Feeds one iteration's loss. `updated` (optional) is set to 1 when an
/// update cycle ran. The current weights are written to `w_m`/`w_i`
/// (optional).
///
/// # Safety
/// `handle` must come from [`owod_controller_new`]; outputs may be NULL.
#[no_mangle]
pub unsafe extern "C" fn owod_controller_step(
    handle: *mut OwodController,
    loss: f64,
    updated: *mut i32,
    w_m: *mut f64,
    w_i: *mut f64,
) -> OwodStatus {
    guard(|| {
        let h = unsafe { handle.as_mut() }.ok_or_else(|| null("handle"))?;
        if !loss.is_finite() {
            return Err(Failure(OwodStatus::Data, format!("loss must be finite, got {loss}")));
        }
        let rec = h.state.step(loss);
        let (m, i) = h.state.weights();
        unsafe {
            if let Some(u) = updated.as_mut() {
                *u = rec.is_some() as i32;
            }
            if let Some(p) = w_m.as_mut() {
                *p = m;
            }
            if let Some(p) = w_i.as_mut() {
                *p = i;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`owod_controller_new`].
#[no_mangle]
pub unsafe extern "C" fn owod_controller_weights(
    handle: *const OwodController,
    w_m: *mut f64,
    w_i: *mut f64,
) -> OwodStatus {
    guard(|| {
        let h = unsafe { handle.as_ref() }.ok_or_else(|| null("handle"))?;
        let (m, i) = h.state.weights();
        let w_m = unsafe { w_m.as_mut() }.ok_or_else(|| null("w_m"))?;
        let w_i = unsafe { w_i.as_mut() }.ok_or_else(|| null("w_i"))?;
        *w_m = m;
        *w_i = i;
        Ok(())
    })
}

/// Number of losses fed so far.
///
/// # Safety
/// `handle` must come from [`owod_controller_new`].
#[no_mangle]
pub unsafe extern "C" fn owod_controller_iteration(handle: *const OwodController, out: *mut usize) -> OwodStatus {
    guard(|| {
        let h = unsafe { handle.as_ref() }.ok_or_else(|| null("handle"))?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = h.state.iteration();
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`owod_controller_new`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn owod_controller_free(handle: *mut OwodController) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Fused pseudo-label score `norm_objectness^w_m * max_iou^w_i`.
#[no_mangle]
pub extern "C" fn owod_fused_score(norm_objectness: f64, max_iou: f64, w_m: f64, w_i: f64) -> f64 {
    fused_score(norm_objectness, max_iou, w_m, w_i)
}

unsafe fn corners(p: *const f64, what: &str) -> Result<BoundingBox, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let c = unsafe { std::slice::from_raw_parts(p, 4) };
    if !(c.iter().all(|v| v.is_finite()) && c[0] <= c[2] && c[1] <= c[3]) {
        return Err(Failure(OwodStatus::Data, format!("{what}: corners {c:?} are not x1<=x2, y1<=y2")));
    }
    Ok(BoundingBox::from_corners(c[0], c[1], c[2], c[3]))
}

/// IOU of two `[x1, y1, x2, y2]` boxes.
///
/// # Safety
/// `a` and `b` must each point to four doubles.
#[no_mangle]
pub unsafe extern "C" fn owod_box_iou(a: *const f64, b: *const f64, out: *mut f64) -> OwodStatus {
    guard(|| {
        let (a, b) = unsafe { (corners(a, "a")?, corners(b, "b")?) };
        *unsafe { out.as_mut() }.ok_or_else(|| null("out"))? = iou(&a, &b);
        Ok(())
    })
}

/// Generalized IOU of two `[x1, y1, x2, y2]` boxes.
///
/// # Safety
/// `a` and `b` must each point to four doubles.
#[no_mangle]
pub unsafe extern "C" fn owod_box_giou(a: *const f64, b: *const f64, out: *mut f64) -> OwodStatus {
    guard(|| {
        let (a, b) = unsafe { (corners(a, "a")?, corners(b, "b")?) };
        *unsafe { out.as_mut() }.ok_or_else(|| null("out"))? = giou(&a, &b);
        Ok(())
    })
}

/// Freshly initialised detector with the default configuration.
///
/// # Safety
/// `out` must point to writable storage.
#[no_mangle]
pub unsafe extern "C" fn owod_detector_new_default(seed: u64, out: *mut *mut OwodDetector) -> OwodStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let detector = Detector::new(DetectorConfig::default(), seed)?;
        *out = Box::into_raw(Box::new(OwodDetector { detector }));
        Ok(())
    })
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure(OwodStatus::Config, "path is not UTF-8".into()))?;
    Ok(Path::new(s))
}

/// Loads a checkpoint written by `owodlab train`/`advance`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn owod_detector_load(path: *const c_char, out: *mut *mut OwodDetector) -> OwodStatus {
    guard(|| {
        let path = unsafe { path_arg(path)? };
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let detector = Detector::load(path)?;
        *out = Box::into_raw(Box::new(OwodDetector { detector }));
        Ok(())
    })
}

/// # Safety
/// `handle` from a detector constructor; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn owod_detector_save(handle: *const OwodDetector, path: *const c_char) -> OwodStatus {
    guard(|| {
        let h = unsafe { handle.as_ref() }.ok_or_else(|| null("handle"))?;
        let path = unsafe { path_arg(path)? };
        h.detector.save(path)?;
        Ok(())
    })
}

/// Input side in pixels and number of known-class slots.
///
/// # Safety
/// `handle` from a detector constructor; outputs may be NULL.
#[no_mangle]
pub unsafe extern "C" fn owod_detector_shape(
    handle: *const OwodDetector,
    image_size: *mut usize,
    num_classes: *mut usize,
) -> OwodStatus {
    guard(|| {
        let h = unsafe { handle.as_ref() }.ok_or_else(|| null("handle"))?;
        let cfg = h.detector.config();
        unsafe {
            if let Some(p) = image_size.as_mut() {
                *p = cfg.image_size;
            }
            if let Some(p) = num_classes.as_mut() {
                *p = cfg.num_classes;
            }
        }
        Ok(())
    })
}

fn registry_for(num_classes: usize, known: &[u32]) -> Result<ClassRegistry, Failure> {
    let mut first: Vec<u32> = known.to_vec();
    first.sort_unstable();
    first.dedup();
    if first.len() != known.len() || first.is_empty() || first.iter().any(|&c| c as usize >= num_classes) {
        return Err(Failure(
            OwodStatus::Config,
            format!("known classes {known:?} must be distinct ids below {num_classes}"),
        ));
    }
    let rest: Vec<u32> = (0..num_classes as u32).filter(|c| !first.contains(c)).collect();
    let mut tasks = vec![first];
    if !rest.is_empty() {
        tasks.push(rest);
    }
    let names = (0..num_classes).map(|c| format!("class_{c}")).collect();
    Ok(ClassRegistry::new(&TaskSpec::new(names, tasks)?))
}

/// Runs the detector on a packed RGB image (`width*height*3` bytes, row
/// major). `known` lists the class ids treated as known; the rest can
/// only surface as unknown. Writes up to `capacity` detections and their
/// total into `count`; returns `BufferTooSmall` when they do not fit.
///
/// # Safety
/// `rgb` must hold `width*height*3` bytes, `known` `num_known` ids and
/// `out` `capacity` elements (may be NULL when `capacity` is 0).
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn owod_detector_detect(
    handle: *const OwodDetector,
    rgb: *const u8,
    width: usize,
    height: usize,
    known: *const u32,
    num_known: usize,
    unknown_top_k: usize,
    out: *mut OwodDetection,
    capacity: usize,
    count: *mut usize,
) -> OwodStatus {
    guard(|| {
        let h = unsafe { handle.as_ref() }.ok_or_else(|| null("handle"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if known.is_null() {
            return Err(null("known"));
        }
        let count = unsafe { count.as_mut() }.ok_or_else(|| null("count"))?;
        let len = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| Failure(OwodStatus::Data, "image dimensions overflow".into()))?;
        let pixels = unsafe { std::slice::from_raw_parts(rgb, len) }.to_vec();
        let img = RasterImage::new(width, height, pixels)?;
        let known = unsafe { std::slice::from_raw_parts(known, num_known) };
        let reg = registry_for(h.detector.config().num_classes, known)?;
        let dets = predict(&h.detector, &img, &reg, unknown_top_k)?;
        *count = dets.len();
        if dets.len() > capacity {
            return Err(Failure(
                OwodStatus::BufferTooSmall,
                format!("{} detections do not fit in {capacity}", dets.len()),
            ));
        }
        if !dets.is_empty() {
            if out.is_null() {
                return Err(null("out"));
            }
            let slots = unsafe { std::slice::from_raw_parts_mut(out, capacity) };
            for (slot, d) in slots.iter_mut().zip(&dets) {
                let [x1, y1, x2, y2] = d.bbox.corners();
                *slot = OwodDetection {
                    x1,
                    y1,
                    x2,
                    y2,
                    score: d.score,
                    class_id: match d.label {
                        Label::Known(c) => c as i32,
                        Label::Unknown => -1,
                    },
                };
            }
        }
        Ok(())
    })
}

/// # Safety
/// `handle` from a detector constructor and not used again.
#[no_mangle]
pub unsafe extern "C" fn owod_detector_free(handle: *mut OwodDetector) {
    if !handle.is_null() {
        drop(unsafe { Box::from_raw(handle) });
    }
}
