//! C interface to the recognizer.
//!
//! Models and transcripts are opaque handles owned by the caller and released
//! with their `_free` function. Every fallible call returns a [`PhtrStatus`];
//! on failure, [`phtr_last_error_message`] describes the error for the
//! calling thread. Strings returned by the library stay valid until the
//! handle that owns them is freed.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use parahtr::collapse::AttentionMap;
use parahtr::data::read_pgm;
use parahtr::eval::transcribe;
use parahtr::layers::ImagePlane;
use parahtr::model::Model;
use parahtr::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhtrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Dimension = 5,
    Numeric = 6,
    /// The transcript carries no attention map (standard-collapse model).
    NoAttention = 7,
    /// The output buffer is smaller than required.
    BufferTooSmall = 8,
    Internal = 99,
}

/// A loaded model.
pub struct PhtrModel {
    model: Model,
}

/// The result of one transcription.
pub struct PhtrTranscript {
    text: CString,
    attention: Option<AttentionMap>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let message = message.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(message).expect("nul bytes removed"));
}

fn status_of(err: &Error) -> PhtrStatus {
    match err {
        Error::Io { .. } => PhtrStatus::Io,
        Error::Format { .. } | Error::UnknownSymbol { .. } => PhtrStatus::Format,
        Error::Dimension { .. } => PhtrStatus::Dimension,
        Error::NonFinite { .. } => PhtrStatus::Numeric,
        _ => PhtrStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (PhtrStatus, String)>) -> PhtrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PhtrStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal error: panic inside parahtr");
            PhtrStatus::Internal
        }
    }
}

fn fail(err: Error) -> (PhtrStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(name: &str) -> (PhtrStatus, String) {
    (PhtrStatus::NullArgument, format!("{name} is null"))
}

unsafe fn path_arg<'a>(path: *const c_char, name: &str) -> Result<&'a Path, (PhtrStatus, String)> {
    if path.is_null() {
        return Err(null(name));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| (PhtrStatus::InvalidArgument, format!("{name} is not valid UTF-8")))?;
    Ok(Path::new(s))
}

fn finish(model: &Model, image: &ImagePlane, out: *mut *mut PhtrTranscript) -> Result<(), (PhtrStatus, String)> {
    let (text, attention) = transcribe(model, image).map_err(fail)?;
    let text = CString::new(text).map_err(|_| (PhtrStatus::Internal, "transcript contains a nul byte".into()))?;
    let handle = Box::new(PhtrTranscript { text, attention });
    // SAFETY: the caller checked `out` for null.
    unsafe { *out = Box::into_raw(handle) };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn phtr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn phtr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint written by `parahtr train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn phtr_model_load(path: *const c_char, out: *mut *mut PhtrModel) -> PhtrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let (model, _) = Model::load(path).map_err(fail)?;
        *out = Box::into_raw(Box::new(PhtrModel { model }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`phtr_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn phtr_model_free(model: *mut PhtrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Image pixels covered by one cell of the attention map.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn phtr_model_cell(
    model: *const PhtrModel,
    cell_height: *mut usize,
    cell_width: *mut usize,
) -> PhtrStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if cell_height.is_null() || cell_width.is_null() {
            return Err(null("cell_height/cell_width"));
        }
        let (h, w) = model.model.downsampling();
        *cell_height = h;
        *cell_width = w;
        Ok(())
    })
}

/// Transcribes an 8-bit grayscale image (row-major, `height * width` bytes,
/// dark ink on a light background).
///
/// # Safety
/// `pixels` must point to `height * width` readable bytes; `model` must be a
/// live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn phtr_transcribe(
    model: *const PhtrModel,
    pixels: *const u8,
    height: usize,
    width: usize,
    out: *mut *mut PhtrTranscript,
) -> PhtrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let len = height
            .checked_mul(width)
            .ok_or_else(|| (PhtrStatus::InvalidArgument, "image size overflows".to_string()))?;
        let data = std::slice::from_raw_parts(pixels, len).iter().map(|&p| f64::from(p)).collect();
        let image = ImagePlane::gray(height, width, data).map_err(fail)?;
        finish(&model.model, &image, out)
    })
}

/// Reads a binary PGM file and transcribes it.
///
/// # Safety
/// `model` must be a live handle, `path` a NUL-terminated string and `out` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn phtr_transcribe_file(
    model: *const PhtrModel,
    path: *const c_char,
    out: *mut *mut PhtrTranscript,
) -> PhtrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let image = read_pgm(path_arg(path, "path")?).map_err(fail)?;
        finish(&model.model, &image, out)
    })
}

/// The transcribed text, or null for a null handle.
///
/// # Safety
/// `transcript` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn phtr_transcript_text(transcript: *const PhtrTranscript) -> *const c_char {
    transcript.as_ref().map_or(ptr::null(), |t| t.text.as_ptr())
}

/// Dimensions of the attention map: collapse steps and the feature grid.
///
/// # Safety
/// `transcript` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn phtr_transcript_attention_shape(
    transcript: *const PhtrTranscript,
    steps: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> PhtrStatus {
    guard(|| {
        let t = transcript.as_ref().ok_or_else(|| null("transcript"))?;
        if steps.is_null() || height.is_null() || width.is_null() {
            return Err(null("steps/height/width"));
        }
        let map = t
            .attention
            .as_ref()
            .ok_or_else(|| (PhtrStatus::NoAttention, "model uses the standard collapse".to_string()))?;
        *steps = map.steps();
        *height = map.height();
        *width = map.width();
        Ok(())
    })
}

/// Copies the attention weights, laid out `[step][row][column]`, into `buffer`.
///
/// # Safety
/// `transcript` must be a live handle and `buffer` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn phtr_transcript_attention(
    transcript: *const PhtrTranscript,
    buffer: *mut f64,
    len: usize,
) -> PhtrStatus {
    guard(|| {
        let t = transcript.as_ref().ok_or_else(|| null("transcript"))?;
        if buffer.is_null() {
            return Err(null("buffer"));
        }
        let map = t
            .attention
            .as_ref()
            .ok_or_else(|| (PhtrStatus::NoAttention, "model uses the standard collapse".to_string()))?;
        let data = map.data();
        if len < data.len() {
            return Err((PhtrStatus::BufferTooSmall, format!("buffer holds {len} values, need {}", data.len())));
        }
        std::slice::from_raw_parts_mut(buffer, data.len()).copy_from_slice(data);
        Ok(())
    })
}

/// Releases a transcript; null is ignored.
///
/// # Safety
/// `transcript` must come from a transcribe call and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn phtr_transcript_free(transcript: *mut PhtrTranscript) {
    if !transcript.is_null() {
        drop(Box::from_raw(transcript));
    }
}
