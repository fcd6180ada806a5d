//! C ABI over the galaxyedit numerics.
//!
//! Every fallible function returns a [`GxStatus`]; on failure the message
//! is available from [`gx_last_error`] on the same thread until the next
//! call that fails. Buffers are caller-owned unless a function says
//! otherwise. Strings returned through `char **` must be released with
//! [`gx_string_free`], layers with [`gx_volterra_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use candle_core::{DType, Device, Tensor};
use galaxyedit::imaging::{Mask, Plane};
use galaxyedit::instructions::{multi_instance_instruction, simple_instruction, Direction};
use galaxyedit::metrics::{frechet_distance, pixel_distance_raw, EmbeddingSet};
use galaxyedit::pipeline::canny::canny_edges;
use galaxyedit::pipeline::morphology::dilate_mask;
use galaxyedit::pipeline::types::Task;
use galaxyedit::volterra::VolterraLayerParams;
use galaxyedit::Error;
use rand::SeedableRng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Io = 5,
    NonFinite = 6,
    Internal = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GxStatus {
    match e {
        Error::Shape { .. } => GxStatus::Shape,
        Error::InvalidArgument(_) => GxStatus::InvalidArgument,
        Error::Config(_) => GxStatus::Config,
        Error::Io { .. } => GxStatus::Io,
        Error::NonFinite(_) => GxStatus::NonFinite,
        _ => GxStatus::Internal,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<candle_core::Error> for Failure {
    fn from(e: candle_core::Error) -> Self {
        Failure::Lib(e.into())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Lib(Error::InvalidArgument(msg.into()))
}

/// Runs `f`, recording any error or panic for [`gx_last_error`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GxStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            GxStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            GxStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn string_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

fn checked_area(a: usize, b: usize, what: &str) -> Result<usize, Failure> {
    a.checked_mul(b).ok_or_else(|| invalid(format!("{what} overflows")))
}

/// Message of the last failure on this thread, or null. Owned by the
/// library; valid until the next failing call on the thread.
#[no_mangle]
pub extern "C" fn gx_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Second-order Volterra layer in double precision with "same" padding.
pub struct GxVolterraLayer {
    params: VolterraLayerParams,
}

unsafe fn new_layer(out: *mut *mut GxVolterraLayer, params: VolterraLayerParams) -> Result<(), Failure> {
    *out_ptr(out, "out")? = Box::into_raw(Box::new(GxVolterraLayer { params }));
    Ok(())
}

/// All-zero layer with `c_out·c_in·k²·(1+2Q)` parameters.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn gx_volterra_new_zero(
    c_in: usize,
    c_out: usize,
    kernel: usize,
    rank_q: usize,
    out: *mut *mut GxVolterraLayer,
) -> GxStatus {
    guard(|| {
        let p = VolterraLayerParams::init_zero(c_in, c_out, kernel, rank_q, DType::F64, &Device::Cpu)?;
        new_layer(out, p)
    })
}

/// Layer with independent Gaussian weights of standard deviation `std`.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn gx_volterra_new_random(
    c_in: usize,
    c_out: usize,
    kernel: usize,
    rank_q: usize,
    std: f64,
    seed: u64,
    out: *mut *mut GxVolterraLayer,
) -> GxStatus {
    guard(|| {
        if !(std >= 0.0 && std.is_finite()) {
            return Err(invalid("std must be finite and >= 0"));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let p = VolterraLayerParams::random(c_in, c_out, kernel, rank_q, std, &mut rng, DType::F64, &Device::Cpu)?;
        new_layer(out, p)
    })
}

/// Layer from explicit weights laid out as `W1, W2a_1..Q, W2b_1..Q`, each
/// `[c_out, c_in, k, k]` row-major.
///
/// # Safety
/// `weights` must point to `weights_len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gx_volterra_from_weights(
    c_in: usize,
    c_out: usize,
    kernel: usize,
    rank_q: usize,
    weights: *const f64,
    weights_len: usize,
    out: *mut *mut GxVolterraLayer,
) -> GxStatus {
    guard(|| {
        if c_in == 0 || c_out == 0 || kernel == 0 || rank_q == 0 {
            return Err(invalid("layer dimensions must be positive"));
        }
        let per = checked_area(checked_area(c_out, c_in, "weights")?, checked_area(kernel, kernel, "weights")?, "weights")?;
        let expected = checked_area(per, 1 + 2 * rank_q, "weights")?;
        if weights_len != expected {
            return Err(Failure::Lib(Error::Shape {
                context: "gx_volterra_from_weights",
                dimension: "weight count",
                expected,
                actual: weights_len,
            }));
        }
        let w = slice(weights, weights_len, "weights")?;
        let kernel_at = |i: usize| Tensor::from_slice(&w[i * per..(i + 1) * per], (c_out, c_in, kernel, kernel), &Device::Cpu);
        let w1 = kernel_at(0)?;
        let w2a = (1..=rank_q).map(kernel_at).collect::<candle_core::Result<Vec<_>>>()?;
        let w2b = (1 + rank_q..=2 * rank_q).map(kernel_at).collect::<candle_core::Result<Vec<_>>>()?;
        let p = VolterraLayerParams::from_tensors(&w1, &w2a, &w2b, 1, kernel / 2)?;
        new_layer(out, p)
    })
}

/// Number of scalar parameters, or 0 for a null layer.
///
/// # Safety
/// `layer` must be null or come from a `gx_volterra_new*` call.
#[no_mangle]
pub unsafe extern "C" fn gx_volterra_param_count(layer: *const GxVolterraLayer) -> usize {
    layer.as_ref().map_or(0, |l| l.params.param_count())
}

/// Forward pass on a `[batch, c_in, height, width]` row-major input into a
/// `[batch, c_out, height', width']` output buffer of `output_len` doubles.
/// With odd kernels the spatial size is unchanged.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn gx_volterra_forward(
    layer: *const GxVolterraLayer,
    input: *const f64,
    batch: usize,
    height: usize,
    width: usize,
    output: *mut f64,
    output_len: usize,
) -> GxStatus {
    guard(|| {
        let l = layer.as_ref().ok_or(Failure::Null("layer"))?;
        let c_in = l.params.c_in();
        let n = checked_area(checked_area(batch, c_in, "input")?, checked_area(height, width, "input")?, "input")?;
        if n == 0 {
            return Err(invalid("input is empty"));
        }
        let x = Tensor::from_slice(slice(input, n, "input")?, (batch, c_in, height, width), &Device::Cpu)?;
        let y = l.params.forward(&x)?;
        let values: Vec<f64> = y.flatten_all()?.to_vec1()?;
        if values.len() != output_len {
            return Err(Failure::Lib(Error::Shape {
                context: "gx_volterra_forward",
                dimension: "output length",
                expected: values.len(),
                actual: output_len,
            }));
        }
        slice_mut(output, output_len, "output")?.copy_from_slice(&values);
        Ok(())
    })
}

/// # Safety
/// `layer` must be null or come from a `gx_volterra_new*` call, and must
/// not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn gx_volterra_free(layer: *mut GxVolterraLayer) {
    if !layer.is_null() {
        drop(Box::from_raw(layer));
    }
}

/// Binary dilation with a `kernel × kernel` square. Nonzero input bytes
/// are set; output bytes are 0 or 1. `mask` and `out` may alias.
///
/// # Safety
/// Both buffers must hold `width·height` bytes.
#[no_mangle]
pub unsafe extern "C" fn gx_dilate(mask: *const u8, width: usize, height: usize, kernel: usize, out: *mut u8) -> GxStatus {
    guard(|| {
        let n = checked_area(width, height, "mask")?;
        let data: Vec<bool> = slice(mask, n, "mask")?.iter().map(|&v| v != 0).collect();
        let d = dilate_mask(&Mask::from_vec(width, height, data)?, kernel)?;
        for (o, &v) in slice_mut(out, n, "out")?.iter_mut().zip(d.data()) {
            *o = u8::from(v);
        }
        Ok(())
    })
}

/// Canny edges of a luma image in `[0, 1]`; output bytes are 0 or 1.
///
/// # Safety
/// `luma` must hold `width·height` floats and `out` as many bytes.
#[no_mangle]
pub unsafe extern "C" fn gx_canny(luma: *const f32, width: usize, height: usize, low: f64, high: f64, out: *mut u8) -> GxStatus {
    guard(|| {
        let n = checked_area(width, height, "image")?;
        let v = slice(luma, n, "luma")?;
        let plane = Plane::from_fn(width, height, |x, y| v[y * width + x]);
        let edges = canny_edges(&plane, low, high)?;
        for (o, &e) in slice_mut(out, n, "out")?.iter_mut().zip(edges.data()) {
            *o = u8::from(e);
        }
        Ok(())
    })
}

/// Fréchet distance between two row-major sets of `dim`-vectors.
///
/// # Safety
/// `x` must hold `nx·dim` doubles, `y` `ny·dim`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gx_frechet_distance(x: *const f64, nx: usize, y: *const f64, ny: usize, dim: usize, out: *mut f64) -> GxStatus {
    guard(|| {
        if dim == 0 {
            return Err(invalid("dim must be positive"));
        }
        let rows = |p, n, what| -> Result<Vec<Vec<f64>>, Failure> {
            Ok(slice(p, checked_area(n, dim, what)?, what)?.chunks(dim).map(<[f64]>::to_vec).collect())
        };
        let fx = EmbeddingSet::new(rows(x, nx, "x")?, "ffi");
        let fy = EmbeddingSet::new(rows(y, ny, "y")?, "ffi");
        *out_ptr(out, "out")? = frechet_distance(&fx, &fy)?;
        Ok(())
    })
}

/// Mean absolute and mean squared difference of two 8-bit buffers, scaled
/// to `[0, 1]`.
///
/// # Safety
/// `a` and `b` must hold `len` bytes; `l1` and `l2` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gx_pixel_distance(a: *const u8, b: *const u8, len: usize, l1: *mut f64, l2: *mut f64) -> GxStatus {
    guard(|| {
        let (d1, d2) = pixel_distance_raw(slice(a, len, "a")?, slice(b, len, "b")?)?;
        *out_ptr(l1, "l1")? = d1;
        *out_ptr(l2, "l2")? = d2;
        Ok(())
    })
}

fn task_of(task: u32) -> Result<Task, Failure> {
    match task {
        0 => Ok(Task::Remove),
        1 => Ok(Task::Add),
        t => Err(invalid(format!("task must be 0 (remove) or 1 (add), got {t}"))),
    }
}

unsafe fn give_string(s: String, out: *mut *mut c_char) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| invalid("string contains NUL"))?;
    *out_ptr(out, "out")? = c.into_raw();
    Ok(())
}

/// `"<task> the <label>"`. `task` is 0 for remove, 1 for add.
///
/// # Safety
/// `label` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gx_simple_instruction(label: *const c_char, task: u32, out: *mut *mut c_char) -> GxStatus {
    guard(|| give_string(simple_instruction(string_arg(label, "label")?, task_of(task)?), out))
}

/// Multi-instance instruction such as `"remove two cars from the right"`.
/// `direction` is 0 left, 1 right, 2 top, 3 bottom; ignored for add.
///
/// # Safety
/// `label` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gx_multi_instance_instruction(
    label: *const c_char,
    k: usize,
    direction: u32,
    task: u32,
    out: *mut *mut c_char,
) -> GxStatus {
    guard(|| {
        let dir = match direction {
            0 => Direction::Left,
            1 => Direction::Right,
            2 => Direction::Top,
            3 => Direction::Bottom,
            d => return Err(invalid(format!("direction must be 0..=3, got {d}"))),
        };
        if k < 2 {
            return Err(invalid("multi-instance edits need k >= 2"));
        }
        give_string(multi_instance_instruction(string_arg(label, "label")?, k, dir, task_of(task)?), out)
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn gx_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        unsafe { CStr::from_ptr(gx_last_error()) }.to_string_lossy().into_owned()
    }

    #[test]
    fn guard_maps_outcomes() {
        assert_eq!(guard(|| Ok(())), GxStatus::Ok);
        assert_eq!(guard(|| Err(Failure::Null("x"))), GxStatus::NullPointer);
        assert_eq!(last_error(), "x is null");
        assert_eq!(guard(|| Err(Error::Config("bad".into()).into())), GxStatus::Config);
        assert_eq!(guard(|| panic!("boom")), GxStatus::Panic);
        assert_eq!(last_error(), "panic: boom");
    }

    #[test]
    fn empty_slices_tolerate_null() {
        unsafe {
            assert!(slice::<u8>(ptr::null(), 0, "a").is_ok());
            assert!(matches!(slice::<u8>(ptr::null(), 1, "a"), Err(Failure::Null("a"))));
        }
        assert!(checked_area(usize::MAX, 2, "n").is_err());
    }
}
