//! C ABI over the s2tpv library: load a trained checkpoint, load or generate
//! a scene and predict its voxel labels.
//!
//! Every fallible call returns an [`S2tpvStatus`]; on failure the message is
//! kept per thread and read back with [`s2tpv_last_error_message`]. Handles
//! are opaque and owned by the caller until passed to their `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use s2tpv::eval::predict;
use s2tpv::model::Model;
use s2tpv::synth::{bench_rig, occlusion_scene, read_scene, WorldSpec};
use s2tpv::train::RunConfig;
use s2tpv::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum S2tpvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Dimension = 4,
    Numeric = 5,
    Geometry = 6,
    Range = 7,
    Label = 8,
    Format = 9,
    Io = 10,
    Internal = 11,
}

/// A model with its run configuration.
pub struct S2tpvModel {
    model: Model,
    run: RunConfig,
}

pub struct S2tpvScene {
    spec: WorldSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> S2tpvStatus {
    match e {
        Error::Dimension(_) => S2tpvStatus::Dimension,
        Error::Numeric(_) => S2tpvStatus::Numeric,
        Error::Geometry(_) => S2tpvStatus::Geometry,
        Error::Config(_) | Error::Wiring(_) => S2tpvStatus::Config,
        Error::Label(_) => S2tpvStatus::Label,
        Error::Range(_) => S2tpvStatus::Range,
        Error::Format(_) => S2tpvStatus::Format,
        Error::Io { .. } => S2tpvStatus::Io,
    }
}

/// Failure before reaching the library: bad pointer or argument.
struct Reject(S2tpvStatus, String);

impl From<Error> for Reject {
    fn from(e: Error) -> Self {
        Reject(status_of(&e), e.to_string())
    }
}

/// Runs `f`, records any failure or panic and converts it to a status.
fn guard(f: impl FnOnce() -> Result<(), Reject>) -> S2tpvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            S2tpvStatus::Ok
        }
        Ok(Err(Reject(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            S2tpvStatus::Internal
        }
    }
}

fn null(what: &str) -> Reject {
    Reject(S2tpvStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` is null or a NUL-terminated string valid for the call.
unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Reject> {
    if p.is_null() {
        return Err(null(what));
    }
    let s =
        CStr::from_ptr(p).to_str().map_err(|_| Reject(S2tpvStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(Path::new(s))
}

/// # Safety
/// `p` is null or points to a live value of type `T`.
unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Reject> {
    p.as_ref().ok_or_else(|| null(what))
}

/// NUL-terminated library version; static storage.
#[no_mangle]
pub extern "C" fn s2tpv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Byte length of the calling thread's last error message, 0 after a success.
#[no_mangle]
pub extern "C" fn s2tpv_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the last error message into `buf` (at most `cap - 1` bytes plus a
/// NUL) and returns the full message length.
///
/// # Safety
/// `buf` is null or valid for `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn s2tpv_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Rows of the three planes, `H*W + D*H + W*D`, for a grid of `dims`.
///
/// # Safety
/// `dims` is null or points to 3 readable values; `out` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn s2tpv_query_count(dims: *const usize, out: *mut usize) -> S2tpvStatus {
    guard(|| {
        if dims.is_null() || out.is_null() {
            return Err(null("dims or out"));
        }
        let d = std::slice::from_raw_parts(dims, 3);
        let n = d[0]
            .checked_mul(d[1])
            .zip(d[2].checked_mul(d[0]))
            .zip(d[1].checked_mul(d[2]))
            .and_then(|((a, b), c)| a.checked_add(b)?.checked_add(c))
            .ok_or_else(|| Reject(S2tpvStatus::InvalidArgument, format!("query count of {d:?} overflows")))?;
        *out = n;
        Ok(())
    })
}

/// Builds the model described by the run configuration at `config_path`
/// (TOML) and loads the weights at `checkpoint_path`.
///
/// # Safety
/// Paths are null or NUL-terminated; `out` is null or writable. On success
/// `*out` owns a model to release with [`s2tpv_model_free`].
#[no_mangle]
pub unsafe extern "C" fn s2tpv_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    out: *mut *mut S2tpvModel,
) -> S2tpvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = path_arg(config_path, "config_path")?;
        let ckpt = path_arg(checkpoint_path, "checkpoint_path")?;
        let text = std::fs::read_to_string(cfg).map_err(|e| Error::Io { path: cfg.into(), source: e })?;
        let run = RunConfig::from_toml(&text)?;
        let mut model: Model = Model::new(run.model.clone())?;
        let f = std::fs::File::open(ckpt).map_err(|e| Error::Io { path: ckpt.into(), source: e })?;
        model.load_checkpoint(std::io::BufReader::new(f))?;
        *out = Box::into_raw(Box::new(S2tpvModel { model, run }));
        Ok(())
    })
}

/// # Safety
/// `model` is null or came from [`s2tpv_model_load`] and is not used again.
#[no_mangle]
pub unsafe extern "C" fn s2tpv_model_free(model: *mut S2tpvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Voxel grid dimensions `(H, W, D)`.
///
/// # Safety
/// `model` is null or live; `dims` is null or valid for 3 writes.
#[no_mangle]
pub unsafe extern "C" fn s2tpv_model_grid_dims(model: *const S2tpvModel, dims: *mut usize) -> S2tpvStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        std::slice::from_raw_parts_mut(dims, 3).copy_from_slice(&m.model.cfg.encoder.grid.dims);
        Ok(())
    })
}

/// History frames the model was trained with.
///
/// # Safety
/// `model` is null or live; `out` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn s2tpv_model_history_steps(model: *const S2tpvModel, out: *mut usize) -> S2tpvStatus {
    guard(|| {
        let m = handle(model, "model")?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.run.train.m_train;
        Ok(())
    })
}

/// Reads a scene document (TOML).
///
/// # Safety
/// `path` is null or NUL-terminated; `out` is null or writable. On success
/// `*out` owns a scene to release with [`s2tpv_scene_free`].
#[no_mangle]
pub unsafe extern "C" fn s2tpv_scene_load(path: *const c_char, out: *mut *mut S2tpvScene) -> S2tpvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = read_scene(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(S2tpvScene { spec }));
        Ok(())
    })
}

/// Generates the seeded occlusion-benchmark scene.
///
/// # Safety
/// `out` is null or writable. On success `*out` owns a scene to release
/// with [`s2tpv_scene_free`].
#[no_mangle]
pub unsafe extern "C" fn s2tpv_scene_occlusion(seed: u64, out: *mut *mut S2tpvScene) -> S2tpvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (spec, _) = occlusion_scene(seed, &bench_rig())?;
        *out = Box::into_raw(Box::new(S2tpvScene { spec }));
        Ok(())
    })
}

/// # Safety
/// `scene` is null or came from a scene constructor and is not used again.
#[no_mangle]
pub unsafe extern "C" fn s2tpv_scene_free(scene: *mut S2tpvScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// # Safety
/// `scene` is null or live; `out` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn s2tpv_scene_frames(scene: *const S2tpvScene, out: *mut usize) -> S2tpvStatus {
    guard(|| {
        let s = handle(scene, "scene")?;
        *out.as_mut().ok_or_else(|| null("out"))? = s.spec.n_frames();
        Ok(())
    })
}

/// Predicts the voxel labels of frame `t` fusing `history` past frames and
/// writes `H*W*D` class ids in `(h, w, d)` order; the last id means empty.
/// `len` must equal `H*W*D`.
///
/// # Safety
/// Handles are null or live; `labels` is null or valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn s2tpv_predict_voxels(
    model: *const S2tpvModel,
    scene: *const S2tpvScene,
    t: usize,
    history: usize,
    labels: *mut u8,
    len: usize,
) -> S2tpvStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let s = handle(scene, "scene")?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        let n: usize = m.model.cfg.encoder.grid.dims.iter().product();
        if len != n {
            return Err(Reject(S2tpvStatus::Dimension, format!("labels buffer holds {len}, grid has {n} voxels")));
        }
        if t >= s.spec.n_frames() {
            return Err(Reject(S2tpvStatus::Range, format!("frame {t} outside {} frames", s.spec.n_frames())));
        }
        let p = predict(&m.model, &s.spec, t, history, &m.run.train.render)?;
        std::slice::from_raw_parts_mut(labels, len).copy_from_slice(&p.voxels.labels);
        Ok(())
    })
}
