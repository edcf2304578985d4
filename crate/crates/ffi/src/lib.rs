//! C ABI over the `sddgs` engine.
//!
//! Objects are opaque handles created by `sddgs_*_load`/`sddgs_*_new`
//! style functions and released with the matching `*_free`. Every fallible
//! function returns an [`SddgsStatus`]; on failure the message is available
//! from [`sddgs_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sddgs::decouple::{partition, render_split, PartitionMode};
use sddgs::image::Image;
use sddgs::nalgebra::Vector3;
use sddgs::render::{render_subset, RenderSettings};
use sddgs::scene::{load_camera, save_scene, Camera, GaussianSet};
use sddgs::synth::{generate, Dataset, SyntheticSpec};
use sddgs::train::load_any_scene;
use sddgs::Error;

/// Status codes. The nonzero engine codes match the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SddgsStatus {
    Ok = 0,
    /// Missing or unreadable file.
    Io = 2,
    /// Malformed input or violated precondition.
    Schema = 3,
    /// Non-finite value during optimization.
    NonFinite = 4,
    /// A required pointer argument was null.
    NullArgument = 10,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 11,
    /// An output buffer was too small.
    BufferTooSmall = 12,
    /// Internal panic; the engine state behind the handles is unchanged.
    Panic = 13,
}

/// Which primitives to render.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SddgsSubset {
    Full = 0,
    Static = 1,
    Dynamic = 2,
}

pub struct SddgsScene(GaussianSet);
pub struct SddgsCamera(Camera);
pub struct SddgsImage(Image);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).unwrap_or_default());
}

fn status_of(err: &Error) -> SddgsStatus {
    match err.exit_code() {
        2 => SddgsStatus::Io,
        4 => SddgsStatus::NonFinite,
        _ => SddgsStatus::Schema,
    }
}

struct Fail(SddgsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SddgsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SddgsStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            SddgsStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(SddgsStatus::NullArgument, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(SddgsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sddgs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sddgs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a scene JSON document or a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sddgs_scene_load(path: *const c_char, out: *mut *mut SddgsScene) -> SddgsStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        put(out, SddgsScene(load_any_scene(path)?))
    })
}

/// Writes a scene JSON document.
///
/// # Safety
/// `scene` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sddgs_scene_save(scene: *const SddgsScene, path: *const c_char) -> SddgsStatus {
    guard(|| {
        let scene = deref(scene, "scene")?;
        let path = path_arg(path, "path")?;
        Ok(save_scene(&scene.0, path)?)
    })
}

/// # Safety
/// `scene` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn sddgs_scene_free(scene: *mut SddgsScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Number of primitives; 0 for a null handle.
///
/// # Safety
/// `scene` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sddgs_scene_len(scene: *const SddgsScene) -> usize {
    scene.as_ref().map_or(0, |s| s.0.len())
}

/// Copies the dynamic coefficients into `out`, which holds `capacity`
/// values.
///
/// # Safety
/// `out` must point to `capacity` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sddgs_scene_dynamic_coefficients(
    scene: *const SddgsScene,
    out: *mut f64,
    capacity: usize,
) -> SddgsStatus {
    guard(|| {
        let scene = deref(scene, "scene")?;
        let n = scene.0.len();
        if out.is_null() {
            return Err(null("out"));
        }
        if capacity < n {
            return Err(Fail(SddgsStatus::BufferTooSmall, format!("need {n} values, got {capacity}")));
        }
        let dst = std::slice::from_raw_parts_mut(out, n);
        for (d, p) in dst.iter_mut().zip(&scene.0.primitives) {
            *d = p.dyn_coeff();
        }
        Ok(())
    })
}

/// Inference-mode split: counts of dynamic (`w > tau_d`), static
/// (`w < tau_s`) and unassigned primitives. Any output pointer may be null.
///
/// # Safety
/// Non-null output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sddgs_scene_partition_counts(
    scene: *const SddgsScene,
    tau_d: f64,
    tau_s: f64,
    dynamic: *mut usize,
    static_: *mut usize,
    unassigned: *mut usize,
) -> SddgsStatus {
    guard(|| {
        let scene = deref(scene, "scene")?;
        let p = partition(&scene.0, PartitionMode::Inference, tau_d, tau_s)?;
        for (ptr, v) in [
            (dynamic, p.dynamic_indices.len()),
            (static_, p.static_indices.len()),
            (unassigned, p.unassigned_indices.len()),
        ] {
            if let Some(r) = ptr.as_mut() {
                *r = v;
            }
        }
        Ok(())
    })
}

/// New scene holding the dynamic or static part of an inference-mode split.
/// `SDDGS_SUBSET_FULL` copies the scene.
///
/// # Safety
/// `scene` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sddgs_scene_extract(
    scene: *const SddgsScene,
    subset: SddgsSubset,
    tau_d: f64,
    tau_s: f64,
    out: *mut *mut SddgsScene,
) -> SddgsStatus {
    guard(|| {
        let scene = deref(scene, "scene")?;
        let p = partition(&scene.0, PartitionMode::Inference, tau_d, tau_s)?;
        let n = scene.0.len();
        let part = match subset {
            SddgsSubset::Full => scene.0.clone(),
            SddgsSubset::Dynamic => scene.0.filtered(&p.dynamic_flags(n)),
            SddgsSubset::Static => scene.0.filtered(&p.static_flags(n)),
        };
        put(out, SddgsScene(part))
    })
}

/// Loads a camera JSON record.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sddgs_camera_load(path: *const c_char, out: *mut *mut SddgsCamera) -> SddgsStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        put(out, SddgsCamera(load_camera(path)?))
    })
}

/// Pinhole camera at `eye` looking at `target`; `up` is the world up
/// direction. Arrays hold three doubles.
///
/// # Safety
/// The arrays must hold three readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sddgs_camera_look_at(
    width: u32,
    height: u32,
    focal: f64,
    eye: *const f64,
    target: *const f64,
    up: *const f64,
    out: *mut *mut SddgsCamera,
) -> SddgsStatus {
    guard(|| {
        let v = |p: *const f64, what| -> Result<Vector3<f64>, Fail> {
            if p.is_null() {
                return Err(null(what));
            }
            Ok(Vector3::from_column_slice(std::slice::from_raw_parts(p, 3)))
        };
        let cam = Camera::look_at(width as usize, height as usize, focal, v(eye, "eye")?, v(target, "target")?, v(up, "up")?);
        cam.validate()?;
        put(out, SddgsCamera(cam))
    })
}

/// # Safety
/// `camera` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sddgs_camera_free(camera: *mut SddgsCamera) {
    if !camera.is_null() {
        drop(Box::from_raw(camera));
    }
}

/// Renders `scene` at time `t`. The static and dynamic subsets use the
/// training-mode split at `tau`.
///
/// # Safety
/// Handles must come from this library; `background` holds three doubles
/// or is null (black); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sddgs_render(
    scene: *const SddgsScene,
    camera: *const SddgsCamera,
    t: f64,
    subset: SddgsSubset,
    tau: f64,
    background: *const f64,
    out: *mut *mut SddgsImage,
) -> SddgsStatus {
    guard(|| {
        let scene = deref(scene, "scene")?;
        let cam = deref(camera, "camera")?;
        let mut settings = RenderSettings::default();
        if !background.is_null() {
            settings.background.copy_from_slice(std::slice::from_raw_parts(background, 3));
        }
        let image = match subset {
            SddgsSubset::Full => render_subset(&scene.0, &cam.0, t, None, &settings).image,
            _ => {
                let p = partition(&scene.0, PartitionMode::Training, tau, tau)?;
                let (d, s) = render_split(&scene.0, &cam.0, t, &p, &settings)?;
                if subset == SddgsSubset::Dynamic {
                    d.image
                } else {
                    s.image
                }
            }
        };
        put(out, SddgsImage(image))
    })
}

/// # Safety
/// `image` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sddgs_image_width(image: *const SddgsImage) -> usize {
    image.as_ref().map_or(0, |i| i.0.width)
}

/// # Safety
/// `image` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sddgs_image_height(image: *const SddgsImage) -> usize {
    image.as_ref().map_or(0, |i| i.0.height)
}

/// Pointer to `width * height * 3` row-major RGB doubles, owned by the
/// image. Null for a null handle.
///
/// # Safety
/// `image` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sddgs_image_data(image: *const SddgsImage) -> *const f64 {
    image.as_ref().map_or(ptr::null(), |i| i.0.data.as_ptr())
}

/// Writes an 8-bit PNG.
///
/// # Safety
/// `image` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sddgs_image_save_png(image: *const SddgsImage, path: *const c_char) -> SddgsStatus {
    guard(|| {
        let image = deref(image, "image")?;
        let path = path_arg(path, "path")?;
        Ok(image.0.save_png(path)?)
    })
}

/// # Safety
/// `image` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sddgs_image_free(image: *mut SddgsImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Generates a synthetic dataset directory. `spec_json` is a JSON object
/// with any subset of the spec fields, or null for the defaults.
///
/// # Safety
/// Strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sddgs_generate_dataset(spec_json: *const c_char, out_dir: *const c_char) -> SddgsStatus {
    guard(|| {
        let dir = path_arg(out_dir, "out_dir")?;
        let spec: SyntheticSpec = if spec_json.is_null() {
            SyntheticSpec::default()
        } else {
            let text = CStr::from_ptr(spec_json)
                .to_str()
                .map_err(|_| Fail(SddgsStatus::InvalidUtf8, "spec_json is not UTF-8".into()))?;
            serde_json::from_str(text).map_err(|e| Fail(SddgsStatus::Schema, format!("spec_json: {e}")))?
        };
        let scene = generate(&spec)?;
        Ok(Dataset::from_scene(&spec, scene).save(dir)?)
    })
}
