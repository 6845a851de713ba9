//! C ABI for loading trained checkpoints and computing embeddings.
//!
//! Every function returns a [`SiclipStatus`]; on failure a human-readable
//! message is available from [`siclip_last_error`] on the same thread.
//! Models are opaque handles created by [`siclip_model_load`] and released
//! with [`siclip_model_free`]. All buffers are caller-owned.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use siclip::analysis::js_divergence;
use siclip::autodiff::Tensor;
use siclip::encoders::{ModelBundle, TokenBatch};
use siclip::train::Checkpoint;
use siclip::Error;

/// Result codes. `SICLIP_STATUS_OK` is zero; everything else is an error.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiclipStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    NonFinite = 6,
    Vocab = 7,
    Internal = 8,
}

/// A loaded two-tower model.
pub struct SiclipModel {
    bundle: ModelBundle<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SiclipStatus {
    match e {
        Error::Shape { .. } | Error::InvalidShape { .. } => SiclipStatus::Shape,
        Error::NonFinite(_) => SiclipStatus::NonFinite,
        Error::Vocab(_) => SiclipStatus::Vocab,
        Error::Io { .. } => SiclipStatus::Io,
        Error::Format(_) | Error::Json(_) => SiclipStatus::Format,
        _ => SiclipStatus::InvalidArgument,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SiclipStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SiclipStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("{what} is null"));
            SiclipStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(&msg);
            SiclipStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            SiclipStatus::Internal
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    // SAFETY: callers pass either null or a pointer obtained from this library
    // (or a valid caller-owned object) that outlives the call.
    unsafe { p.as_ref() }.ok_or(Fail::Null(what))
}

/// Message describing the most recent failure on this thread; empty after a
/// success. The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn siclip_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn siclip_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}

/// Loads an f32 checkpoint. On success `*out` receives a handle to free
/// with [`siclip_model_free`]; on failure it is set to null.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn siclip_model_load(path: *const c_char, out: *mut *mut SiclipModel) -> SiclipStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        // SAFETY: checked non-null above.
        unsafe { *out = ptr::null_mut() };
        if path.is_null() {
            return Err(Fail::Null("path"));
        }
        // SAFETY: caller guarantees a NUL-terminated string.
        let path = unsafe { CStr::from_ptr(path) }
            .to_str()
            .map_err(|_| Fail::Arg("path is not valid UTF-8".into()))?;
        let ckpt = Checkpoint::<f32>::load(Path::new(path))?;
        let model = Box::new(SiclipModel { bundle: ckpt.bundle });
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(model) };
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`siclip_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn siclip_model_free(model: *mut SiclipModel) {
    if !model.is_null() {
        // SAFETY: pointer came from Box::into_raw in siclip_model_load.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Shape facts needed to size buffers.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SiclipModelInfo {
    pub embed_dim: usize,
    pub image_size: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub image_blocks: usize,
    pub text_blocks: usize,
    pub trainable_params: usize,
    pub total_params: usize,
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn siclip_model_info(model: *const SiclipModel, out: *mut SiclipModelInfo) -> SiclipStatus {
    guard(|| {
        let m = &non_null(model, "model")?.bundle;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let info = SiclipModelInfo {
            embed_dim: m.config.embed_dim,
            image_size: m.config.image.image_size,
            max_len: m.config.text.max_len,
            vocab_size: m.config.text.vocab_size,
            image_blocks: m.config.image.n_blocks,
            text_blocks: m.config.text.n_blocks,
            trainable_params: m.trainable_count(),
            total_params: m.store.numel(),
        };
        // SAFETY: checked non-null above.
        unsafe { *out = info };
        Ok(())
    })
}

fn check_out(len: usize, want: usize) -> Result<(), Fail> {
    if len != want {
        return Err(Fail::Arg(format!("output buffer holds {len} floats, need {want}")));
    }
    Ok(())
}

/// Encodes `batch` images given as planar `B×3×S×S` floats in `[0, 1]` into
/// unit-norm rows written to `out` (`batch × embed_dim` floats).
///
/// # Safety
/// `pixels` must hold `batch·3·S·S` floats and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn siclip_encode_images(
    model: *const SiclipModel,
    pixels: *const f32,
    batch: usize,
    out: *mut f32,
    out_len: usize,
) -> SiclipStatus {
    guard(|| {
        let m = &non_null(model, "model")?.bundle;
        if pixels.is_null() {
            return Err(Fail::Null("pixels"));
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        if batch == 0 {
            return Err(Fail::Arg("batch must be positive".into()));
        }
        check_out(out_len, batch * m.config.embed_dim)?;
        let s = m.config.image.image_size;
        // SAFETY: caller guarantees the buffer length.
        let data = unsafe { std::slice::from_raw_parts(pixels, batch * 3 * s * s) }.to_vec();
        let emb = m.embed_images(&Tensor::new(&[batch, 3, s, s], data)?)?;
        // SAFETY: length checked by check_out.
        unsafe { std::slice::from_raw_parts_mut(out, out_len) }.copy_from_slice(emb.data());
        Ok(())
    })
}

/// Encodes `batch` token rows of length `len` (id 0 pads) into unit-norm
/// rows written to `out` (`batch × embed_dim` floats).
///
/// # Safety
/// `ids` must hold `batch·len` values and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn siclip_encode_tokens(
    model: *const SiclipModel,
    ids: *const u32,
    batch: usize,
    len: usize,
    out: *mut f32,
    out_len: usize,
) -> SiclipStatus {
    guard(|| {
        let m = &non_null(model, "model")?.bundle;
        if ids.is_null() {
            return Err(Fail::Null("ids"));
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        check_out(out_len, batch * m.config.embed_dim)?;
        // SAFETY: caller guarantees the buffer length.
        let ids = unsafe { std::slice::from_raw_parts(ids, batch * len) }.to_vec();
        let emb = m.embed_text(&TokenBatch::new(batch, len, ids)?)?;
        // SAFETY: length checked by check_out.
        unsafe { std::slice::from_raw_parts_mut(out, out_len) }.copy_from_slice(emb.data());
        Ok(())
    })
}

/// Row-averaged Jensen–Shannon divergence (nats) between two row-stochastic
/// `rows × cols` matrices.
///
/// # Safety
/// `p` and `q` must hold `rows·cols` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn siclip_js_divergence(
    p: *const f64,
    q: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> SiclipStatus {
    guard(|| {
        if p.is_null() || q.is_null() {
            return Err(Fail::Null("p/q"));
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        if rows == 0 || cols == 0 {
            return Err(Fail::Arg("matrices must be non-empty".into()));
        }
        // SAFETY: caller guarantees both buffers hold rows·cols values.
        let (a, b) = unsafe {
            (
                std::slice::from_raw_parts(p, rows * cols),
                std::slice::from_raw_parts(q, rows * cols),
            )
        };
        let js = js_divergence(&Tensor::new(&[rows, cols], a.to_vec())?, &Tensor::new(&[rows, cols], b.to_vec())?)?;
        // SAFETY: checked non-null above.
        unsafe { *out = js };
        Ok(())
    })
}
