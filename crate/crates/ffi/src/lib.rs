//! C ABI over `nestedformer`.
//!
//! Every function returns an [`NfStatus`]; on failure the message is kept
//! per thread and can be read with [`nf_last_error`]. Models are opaque
//! handles created by `nf_model_*` constructors and released with
//! [`nf_model_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use nestedformer::checkpoint::{load_checkpoint, save_checkpoint};
use nestedformer::data::MultiModalVolume;
use nestedformer::metrics::{dice_score, hd95, SegmentationMask};
use nestedformer::model::{attention_cost, AttentionMode, Model, ModelConfig};
use nestedformer::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Format = 4,
    UnsupportedVersion = 5,
    Io = 6,
    Numeric = 7,
    Internal = 8,
}

/// Opaque model handle.
pub struct NfModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> NfStatus {
    match e {
        Error::Dimension(_) => NfStatus::Dimension,
        Error::Format(_) => NfStatus::Format,
        Error::UnsupportedVersion { .. } => NfStatus::UnsupportedVersion,
        Error::Io(_) => NfStatus::Io,
        Error::Numeric(_) => NfStatus::Numeric,
        Error::Generation(_) | Error::Csv(_) => NfStatus::Internal,
        Error::Contract(_) | Error::Config(_) | Error::Validation(_) | Error::Json(_) => NfStatus::InvalidArgument,
    }
}

/// Run `f`, translating errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), (NfStatus, String)>) -> NfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NfStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            NfStatus::Internal
        }
    }
}

fn lib(e: Error) -> (NfStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (NfStatus, String) {
    (NfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, (NfStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (NfStatus::InvalidArgument, "path is not valid UTF-8".to_string()))?;
    Ok(Path::new(s))
}

unsafe fn model_ref<'a>(m: *const NfModel) -> Result<&'a Model, (NfStatus, String)> {
    m.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

fn emit(out: *mut *mut NfModel, model: Model) -> Result<(), (NfStatus, String)> {
    unsafe { *out = Box::into_raw(Box::new(NfModel { inner: model })) };
    Ok(())
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length excluding the NUL,
/// or 0 if there is none.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn nf_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match &*e.borrow() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Build the small test-scale model for `modalities` inputs of extents
/// `d×h×w` (each a multiple of 16) and `classes` output labels.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn nf_model_build_toy(
    modalities: u32,
    classes: u32,
    d: u32,
    h: u32,
    w: u32,
    seed: u64,
    out: *mut *mut NfModel,
) -> NfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut cfg = ModelConfig::toy(
            modalities as usize,
            classes as usize,
            [d as usize, h as usize, w as usize],
        );
        cfg.seed = seed;
        emit(out, Model::build(cfg).map_err(lib)?)
    })
}

/// Build a model from a JSON configuration (missing fields take defaults).
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` as for
/// [`nf_model_build_toy`].
#[no_mangle]
pub unsafe extern "C" fn nf_model_build_json(config_json: *const c_char, out: *mut *mut NfModel) -> NfStatus {
    guard(|| {
        if config_json.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let text = CStr::from_ptr(config_json)
            .to_str()
            .map_err(|_| (NfStatus::InvalidArgument, "config is not valid UTF-8".to_string()))?;
        let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| lib(e.into()))?;
        emit(out, Model::build(cfg).map_err(lib)?)
    })
}

/// Load a checkpoint written by [`nf_model_save`] or the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` as for [`nf_model_build_toy`].
#[no_mangle]
pub unsafe extern "C" fn nf_model_load(path: *const c_char, out: *mut *mut NfModel) -> NfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = load_checkpoint(path_arg(path)?, None, false).map_err(lib)?;
        emit(out, ck.model)
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn nf_model_save(model: *const NfModel, path: *const c_char) -> NfStatus {
    guard(|| save_checkpoint(path_arg(path)?, model_ref(model)?, 0, None).map_err(lib))
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nf_model_free(model: *mut NfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nf_model_param_count(model: *const NfModel, out: *mut u64) -> NfStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.params.count() as u64;
        Ok(())
    })
}

/// Write the model's input shape as `[modalities, d, h, w, classes]`.
///
/// # Safety
/// `model` must be a live handle; `out` must hold 5 values.
#[no_mangle]
pub unsafe extern "C" fn nf_model_shape(model: *const NfModel, out: *mut u32) -> NfStatus {
    guard(|| {
        let c = &model_ref(model)?.cfg;
        if out.is_null() {
            return Err(null("out"));
        }
        let v = [c.modalities, c.extents[0], c.extents[1], c.extents[2], c.classes];
        for (i, x) in v.into_iter().enumerate() {
            *out.add(i) = x as u32;
        }
        Ok(())
    })
}

/// Forward pass. `input` holds `modalities·d·h·w` floats, modality-major
/// then z, y, x. `logits` receives `d·h·w·classes` floats, class fastest.
///
/// # Safety
/// `input` must be valid for `input_len` floats and `logits` for `logits_len`.
#[no_mangle]
pub unsafe extern "C" fn nf_model_forward(
    model: *const NfModel,
    input: *const f32,
    input_len: usize,
    logits: *mut f32,
    logits_len: usize,
) -> NfStatus {
    guard(|| {
        let m = model_ref(model)?;
        if input.is_null() || logits.is_null() {
            return Err(null("buffer"));
        }
        let cfg = &m.cfg;
        let vox: usize = cfg.extents.iter().product();
        if input_len != cfg.modalities * vox || logits_len != vox * cfg.classes {
            return Err((
                NfStatus::Dimension,
                format!(
                    "expected {} input and {} logit values, got {input_len} and {logits_len}",
                    cfg.modalities * vox,
                    vox * cfg.classes
                ),
            ));
        }
        let data = slice::from_raw_parts(input, input_len).to_vec();
        let vol = MultiModalVolume::new(cfg.modalities, cfg.extents, [1.0f32; 3], data).map_err(lib)?;
        let out = m.predict(&vol).map_err(lib)?;
        let dst = slice::from_raw_parts_mut(logits, logits_len);
        for (d, s) in dst.iter_mut().zip(out.data()) {
            *d = *s as f32;
        }
        Ok(())
    })
}

/// Attention score entries per head and layer; `tsa` selects the
/// tri-oriented count, otherwise full attention.
///
/// # Safety
/// `grid` and `window` must hold 3 values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nf_attention_cost(grid: *const u32, window: *const u32, tsa: bool, out: *mut u64) -> NfStatus {
    guard(|| {
        if grid.is_null() || window.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let g = slice::from_raw_parts(grid, 3);
        let w = slice::from_raw_parts(window, 3);
        let mode = if tsa { AttentionMode::Tsa } else { AttentionMode::Full };
        *out = attention_cost(
            [g[0] as usize, g[1] as usize, g[2] as usize],
            [w[0] as usize, w[1] as usize, w[2] as usize],
            mode,
        )
        .map_err(lib)?;
        Ok(())
    })
}

unsafe fn masks(
    pred: *const u8,
    gt: *const u8,
    extents: *const u32,
) -> Result<(SegmentationMask, SegmentationMask), (NfStatus, String)> {
    if pred.is_null() || gt.is_null() || extents.is_null() {
        return Err(null("argument"));
    }
    let e = slice::from_raw_parts(extents, 3);
    let ext = [e[0] as usize, e[1] as usize, e[2] as usize];
    let n: usize = ext.iter().product();
    let (p, g) = (slice::from_raw_parts(pred, n), slice::from_raw_parts(gt, n));
    // Labels are only compared for equality, so any byte is a valid label.
    let mk = |l: &[u8]| SegmentationMask::new(l.to_vec(), ext, 256).map_err(lib);
    Ok((mk(p)?, mk(g)?))
}

/// Dice of label `class` between two `d·h·w` label volumes.
///
/// # Safety
/// `pred` and `gt` must be valid for `extents[0]·extents[1]·extents[2]` bytes.
#[no_mangle]
pub unsafe extern "C" fn nf_dice(
    pred: *const u8,
    gt: *const u8,
    extents: *const u32,
    class: u8,
    out: *mut f64,
) -> NfStatus {
    guard(|| {
        let (p, g) = masks(pred, gt, extents)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = dice_score(&p, &g, class).map_err(lib)?;
        Ok(())
    })
}

/// HD95 of label `class` with voxel `spacing` (z, y, x). When exactly one
/// volume lacks the label the result is `+INFINITY`.
///
/// # Safety
/// As for [`nf_dice`]; `spacing` must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn nf_hd95(
    pred: *const u8,
    gt: *const u8,
    extents: *const u32,
    class: u8,
    spacing: *const f64,
    out: *mut f64,
) -> NfStatus {
    guard(|| {
        let (p, g) = masks(pred, gt, extents)?;
        if out.is_null() || spacing.is_null() {
            return Err(null("argument"));
        }
        let s = slice::from_raw_parts(spacing, 3);
        *out = hd95(&p, &g, class, [s[0], s[1], s[2]]).map_err(lib)?;
        Ok(())
    })
}
