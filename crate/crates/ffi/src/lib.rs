//! C ABI over the blobdrag engine.
//!
//! Conventions:
//!
//! - Every fallible function returns a [`BdStatus`]; results go through out
//!   pointers. On failure, [`bd_last_error_message`] returns a description.
//! - Masks and schedules are opaque handles created by `*_new`-style
//!   functions and released with the matching `*_free`.
//! - Matrices are row-major `double` buffers; latents are `H x W x C`.
//! - Panics never cross the boundary; they surface as `BD_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use blobdrag::attnctl::{nn_copy, soft_anchor, Matrix};
use blobdrag::blobgeom::{self, BlobParams, Mask};
use blobdrag::schedule::{make_schedule, NoiseSchedule};
use blobdrag::{cli, eval, io, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    DegenerateMask = 4,
    InvalidStep = 5,
    Validation = 6,
    Io = 7,
    Format = 8,
    CheckFailed = 9,
    Panic = 10,
}

/// Tilted ellipse: center, semi-axes, rotation in radians.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BdBlobParams {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl From<BlobParams> for BdBlobParams {
    fn from(p: BlobParams) -> Self {
        BdBlobParams {
            cx: p.cx,
            cy: p.cy,
            a: p.a,
            b: p.b,
            theta: p.theta,
        }
    }
}

/// Opaque binary mask.
pub struct BdMask(Mask);

/// Opaque noise schedule.
pub struct BdSchedule(NoiseSchedule);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BdStatus {
    match e {
        Error::InvalidParameter(_) => BdStatus::InvalidArgument,
        Error::ShapeMismatch(_) => BdStatus::ShapeMismatch,
        Error::DegenerateMask(_) => BdStatus::DegenerateMask,
        Error::InvalidStep(_) => BdStatus::InvalidStep,
        Error::Validation { .. } | Error::Json(_) => BdStatus::Validation,
        Error::Io { .. } => BdStatus::Io,
        Error::Format { .. } => BdStatus::Format,
        Error::CheckFailed(_) => BdStatus::CheckFailed,
    }
}

struct Fail(BdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(BdStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            BdStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            BdStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn to_path(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(BdStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn to_params(p: &BdBlobParams) -> Result<BlobParams, Fail> {
    Ok(BlobParams::new(p.cx, p.cy, p.a, p.b, p.theta)?)
}

fn matrix(data: &[f64], rows: usize, cols: usize) -> Matrix {
    Matrix::from_shape_vec((rows, cols), data.to_vec()).expect("length checked by caller")
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the length the full message
/// needs including the NUL, or 0 when there is no error.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn bd_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            return 0;
        };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Creates an all-false `height x width` mask.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bd_mask_new(height: usize, width: usize, out: *mut *mut BdMask) -> BdStatus {
    guard(|| {
        let m = Mask::new(height, width)?;
        write_out(out, Box::into_raw(Box::new(BdMask(m))), "out")
    })
}

/// Creates a mask from `height * width` row-major bytes; nonzero is true.
///
/// # Safety
/// `bits` must be valid for `height * width` bytes; `out` for writes.
#[no_mangle]
pub unsafe extern "C" fn bd_mask_from_bytes(
    height: usize,
    width: usize,
    bits: *const u8,
    out: *mut *mut BdMask,
) -> BdStatus {
    guard(|| {
        let n = height
            .checked_mul(width)
            .ok_or_else(|| Fail(BdStatus::InvalidArgument, "mask size overflows".into()))?;
        let bits = slice(bits, n, "bits")?;
        let m = Mask::from_bits(height, width, bits.iter().map(|&b| b != 0).collect())?;
        write_out(out, Box::into_raw(Box::new(BdMask(m))), "out")
    })
}

/// Releases a mask; null is ignored.
///
/// # Safety
/// `mask` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bd_mask_free(mask: *mut BdMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// # Safety
/// `mask` must be a live handle; `height`, `width` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bd_mask_dims(mask: *const BdMask, height: *mut usize, width: *mut usize) -> BdStatus {
    guard(|| {
        let m = &deref(mask, "mask")?.0;
        write_out(height, m.height(), "height")?;
        write_out(width, m.width(), "width")
    })
}

/// # Safety
/// `mask` must be a live handle; `area` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bd_mask_area(mask: *const BdMask, area: *mut usize) -> BdStatus {
    guard(|| write_out(area, deref(mask, "mask")?.0.area(), "area"))
}

/// Copies the mask as row-major 0/1 bytes into `buf` of length `len`.
///
/// # Safety
/// `mask` must be a live handle; `buf` valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn bd_mask_copy_bytes(mask: *const BdMask, buf: *mut u8, len: usize) -> BdStatus {
    guard(|| {
        let m = &deref(mask, "mask")?.0;
        if len != m.bits().len() {
            return Err(Fail(
                BdStatus::ShapeMismatch,
                format!("buffer holds {len} bytes, mask has {}", m.bits().len()),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        for (i, &b) in m.bits().iter().enumerate() {
            *buf.add(i) = b as u8;
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bd_mask_read_pgm(path: *const c_char, out: *mut *mut BdMask) -> BdStatus {
    guard(|| {
        let m = io::read_pgm(&to_path(path, "path")?)?;
        write_out(out, Box::into_raw(Box::new(BdMask(m))), "out")
    })
}

/// # Safety
/// `mask` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bd_mask_write_pgm(mask: *const BdMask, path: *const c_char) -> BdStatus {
    guard(|| Ok(io::write_pgm(&to_path(path, "path")?, &deref(mask, "mask")?.0)?))
}

/// Rasterizes an ellipse by pixel-center membership.
///
/// # Safety
/// `params` must be readable; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bd_rasterize(
    params: *const BdBlobParams,
    height: usize,
    width: usize,
    out: *mut *mut BdMask,
) -> BdStatus {
    guard(|| {
        let p = to_params(deref(params, "params")?)?;
        let m = blobgeom::rasterize_blob(&p, height, width)?;
        write_out(out, Box::into_raw(Box::new(BdMask(m))), "out")
    })
}

/// # Safety
/// `a`, `b` must be live handles; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bd_mask_iou(a: *const BdMask, b: *const BdMask, out: *mut f64) -> BdStatus {
    guard(|| {
        let v = blobgeom::mask_iou(&deref(a, "a")?.0, &deref(b, "b")?.0)?;
        write_out(out, v, "out")
    })
}

/// Fits an ellipse maximizing IoU with the mask.
///
/// # Safety
/// `mask` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bd_fit_ellipse(mask: *const BdMask, out: *mut BdBlobParams) -> BdStatus {
    guard(|| {
        let p = blobgeom::fit_ellipse(&deref(mask, "mask")?.0)?;
        write_out(out, p.into(), "out")
    })
}

/// Dilation with a `k x k` square; `k` must be odd.
///
/// # Safety
/// `mask` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bd_dilate(mask: *const BdMask, k: usize, out: *mut *mut BdMask) -> BdStatus {
    guard(|| {
        let m = blobgeom::dilate(&deref(mask, "mask")?.0, k)?;
        write_out(out, Box::into_raw(Box::new(BdMask(m))), "out")
    })
}

/// Linear-beta schedule with `steps` steps.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bd_schedule_new(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    out: *mut *mut BdSchedule,
) -> BdStatus {
    guard(|| {
        let s = make_schedule(steps, beta_start, beta_end)?;
        write_out(out, Box::into_raw(Box::new(BdSchedule(s))), "out")
    })
}

/// # Safety
/// `schedule` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bd_schedule_free(schedule: *mut BdSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// Cumulative signal fraction at step `t` (1 at `t = 0`).
///
/// # Safety
/// `schedule` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bd_schedule_alpha_bar(schedule: *const BdSchedule, t: usize, out: *mut f64) -> BdStatus {
    guard(|| {
        let v = deref(schedule, "schedule")?.0.alpha_bar(t)?;
        write_out(out, v, "out")
    })
}

/// `f * O_s + (1 - f) * O_d` with `f = t / total`, over `rows x cols`
/// buffers. `out` may alias neither input.
///
/// # Safety
/// All buffers must hold `rows * cols` doubles.
#[no_mangle]
pub unsafe extern "C" fn bd_soft_anchor(
    o_s: *const f64,
    o_d: *const f64,
    rows: usize,
    cols: usize,
    t: usize,
    total: usize,
    out: *mut f64,
) -> BdStatus {
    guard(|| {
        let n = rows * cols;
        let s = matrix(slice(o_s, n, "o_s")?, rows, cols);
        let d = matrix(slice(o_d, n, "o_d")?, rows, cols);
        let r = soft_anchor(&s, &d, t, total)?;
        if n > 0 && out.is_null() {
            return Err(null("out"));
        }
        for (i, v) in r.iter().enumerate() {
            *out.add(i) = *v;
        }
        Ok(())
    })
}

/// Nearest-neighbor copy over `(height * width) x channels` feature buffers;
/// masks are at `height x width`.
///
/// # Safety
/// Buffers must hold `height * width * channels` doubles; masks must be live.
#[no_mangle]
pub unsafe extern "C" fn bd_nn_copy(
    o_a: *const f64,
    o_s: *const f64,
    height: usize,
    width: usize,
    channels: usize,
    dest_region: *const BdMask,
    src_region: *const BdMask,
    out: *mut f64,
) -> BdStatus {
    guard(|| {
        let rows = height * width;
        let n = rows * channels;
        let a = matrix(slice(o_a, n, "o_a")?, rows, channels);
        let s = matrix(slice(o_s, n, "o_s")?, rows, channels);
        let r = nn_copy(&a, &s, &deref(dest_region, "dest_region")?.0, &deref(src_region, "src_region")?.0)?;
        if n > 0 && out.is_null() {
            return Err(null("out"));
        }
        for (i, v) in r.iter().enumerate() {
            *out.add(i) = *v;
        }
        Ok(())
    })
}

/// KID between `m` real and `n` fake embeddings of dimension `dim`, each set
/// a row-major `count x dim` buffer.
///
/// # Safety
/// Buffers must hold `m * dim` and `n * dim` doubles; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bd_kid(
    real: *const f64,
    m: usize,
    fake: *const f64,
    n: usize,
    dim: usize,
    out: *mut f64,
) -> BdStatus {
    guard(|| {
        if dim == 0 {
            return Err(Fail(BdStatus::InvalidArgument, "dim must be positive".into()));
        }
        let rows = |p, count, what| -> Result<Vec<Vec<f64>>, Fail> {
            Ok(slice(p, count * dim, what)?.chunks(dim).map(<[f64]>::to_vec).collect())
        };
        let v = eval::kid(&rows(real, m, "real")?, &rows(fake, n, "fake")?)?;
        write_out(out, v, "out")
    })
}

/// Runs the `edit` command. `config` may be null for defaults.
///
/// # Safety
/// Non-null arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn bd_run_edit(
    scene: *const c_char,
    drag: *const c_char,
    config: *const c_char,
    out_dir: *const c_char,
) -> BdStatus {
    guard(|| {
        let config = if config.is_null() {
            None
        } else {
            Some(to_path(config, "config")?)
        };
        cli::cmd_edit(
            &to_path(scene, "scene")?,
            &to_path(drag, "drag")?,
            config.as_deref(),
            &to_path(out_dir, "out_dir")?,
        )?;
        Ok(())
    })
}

/// Runs the self-checking demo into `out_dir`.
///
/// # Safety
/// `out_dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bd_run_demo(seed: u64, out_dir: *const c_char) -> BdStatus {
    guard(|| {
        cli::cmd_demo(seed, &to_path(out_dir, "out_dir")?)?;
        Ok(())
    })
}
