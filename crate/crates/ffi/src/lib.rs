//! C ABI over `gcfs`.
//!
//! Every fallible function returns a [`GcfsStatus`]; on failure the message
//! is available from [`gcfs_last_error`] on the same thread until the next
//! failing call. Objects are opaque handles released with their `_free`
//! function. Images cross the boundary as planar `f64` buffers
//! (`channels x height x width`, values in `[0, 1]`).

// Pointer arguments are null-checked; their validity is the caller's
// contract, as for any C API.
#![allow(clippy::not_unsafe_ptr_arg_deref)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gcfs::dataio::Image;
use gcfs::trainer::Checkpoint;
use gcfs::wsgraph::{ws_generate, Aggregator, Graph};
use gcfs::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GcfsStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Arguments or file contents failed validation.
    InvalidArgument = 2,
    /// Reading or writing a file failed.
    Io = 3,
    /// Caller-provided buffer is too small; the required size was written back.
    BufferTooSmall = 4,
    /// Computation failed after validation.
    Runtime = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// Opaque Watts-Strogatz graph.
pub struct GcfsGraph(Graph);

/// Opaque trained model restored from a checkpoint.
pub struct GcfsModel(gcfs::models::Model);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(err: &Error) -> GcfsStatus {
    match err {
        Error::Io { .. } => GcfsStatus::Io,
        e if e.is_validation() => GcfsStatus::InvalidArgument,
        _ => GcfsStatus::Runtime,
    }
}

fn fail(status: GcfsStatus, msg: impl Into<String>) -> GcfsStatus {
    set_error(msg);
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), GcfsStatus>) -> GcfsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GcfsStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(GcfsStatus::Panic, "internal panic"),
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, GcfsStatus>;
}

impl<T> OrStatus<T> for gcfs::Result<T> {
    fn or_status(self) -> Result<T, GcfsStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, GcfsStatus> {
    // SAFETY: callers pass either null or a pointer obtained from this library.
    unsafe { p.as_ref() }.ok_or_else(|| fail(GcfsStatus::NullPointer, format!("{what} is null")))
}

fn path_arg(p: *const c_char) -> Result<String, GcfsStatus> {
    if p.is_null() {
        return Err(fail(GcfsStatus::NullPointer, "path is null"));
    }
    // SAFETY: non-null, NUL-terminated per the API contract.
    let s = unsafe { CStr::from_ptr(p) };
    s.to_str()
        .map(str::to_owned)
        .map_err(|_| fail(GcfsStatus::InvalidArgument, "path is not valid UTF-8"))
}

fn write_out<T>(out: *mut T, value: T) -> Result<(), GcfsStatus> {
    if out.is_null() {
        return Err(fail(GcfsStatus::NullPointer, "output pointer is null"));
    }
    // SAFETY: non-null and writable per the API contract.
    unsafe { out.write(value) };
    Ok(())
}

fn image_arg(
    data: *const f64,
    width: usize,
    height: usize,
    channels: usize,
) -> Result<Image, GcfsStatus> {
    if data.is_null() {
        return Err(fail(GcfsStatus::NullPointer, "image buffer is null"));
    }
    let len = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| fail(GcfsStatus::InvalidArgument, "image dimensions overflow"))?;
    // SAFETY: the caller guarantees `len` readable values.
    let slice = unsafe { std::slice::from_raw_parts(data, len) };
    Image::new(width, height, channels, slice.to_vec()).or_status()
}

/// Copies `src` into the caller's buffer or reports the size it needs.
fn fill<T: Copy>(
    src: &[T],
    buf: *mut T,
    capacity: usize,
    written: *mut usize,
) -> Result<(), GcfsStatus> {
    if !written.is_null() {
        // SAFETY: checked non-null.
        unsafe { written.write(src.len()) };
    }
    if capacity < src.len() {
        return Err(fail(
            GcfsStatus::BufferTooSmall,
            format!("buffer holds {capacity} values, {} needed", src.len()),
        ));
    }
    if buf.is_null() {
        return Err(fail(GcfsStatus::NullPointer, "output buffer is null"));
    }
    // SAFETY: `buf` has room for `capacity >= src.len()` values.
    unsafe { ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len()) };
    Ok(())
}

/// Message for the most recent failure on this thread; empty if none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn gcfs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gcfs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates a WS graph with `nodes` nodes, even mean degree `degree` and
/// rewiring probability `rho`.
#[no_mangle]
pub extern "C" fn gcfs_graph_generate(
    nodes: usize,
    degree: usize,
    rho: f64,
    seed: u64,
    out: *mut *mut GcfsGraph,
) -> GcfsStatus {
    guard(|| {
        let g = ws_generate(nodes, degree, rho, seed).or_status()?;
        write_out(out, Box::into_raw(Box::new(GcfsGraph(g))))
    })
}

/// Loads an edge-list file.
#[no_mangle]
pub extern "C" fn gcfs_graph_load(path: *const c_char, out: *mut *mut GcfsGraph) -> GcfsStatus {
    guard(|| {
        let g = Graph::load(path_arg(path)?).or_status()?;
        write_out(out, Box::into_raw(Box::new(GcfsGraph(g))))
    })
}

#[no_mangle]
pub extern "C" fn gcfs_graph_save(graph: *const GcfsGraph, path: *const c_char) -> GcfsStatus {
    guard(|| {
        non_null(graph, "graph")?
            .0
            .save(path_arg(path)?)
            .or_status()
    })
}

/// Node count, or 0 for a null handle.
#[no_mangle]
pub extern "C" fn gcfs_graph_node_count(graph: *const GcfsGraph) -> usize {
    // SAFETY: null or a live handle.
    unsafe { graph.as_ref() }.map_or(0, |g| g.0.n())
}

/// Edge count, or 0 for a null handle.
#[no_mangle]
pub extern "C" fn gcfs_graph_edge_count(graph: *const GcfsGraph) -> usize {
    // SAFETY: null or a live handle.
    unsafe { graph.as_ref() }.map_or(0, |g| g.0.edges().len())
}

/// Writes edges as `i0, j0, i1, j1, ...` with `i < j`, sorted.
/// `capacity` counts values (twice the edge count).
#[no_mangle]
pub extern "C" fn gcfs_graph_edges(
    graph: *const GcfsGraph,
    buf: *mut usize,
    capacity: usize,
    written: *mut usize,
) -> GcfsStatus {
    guard(|| {
        let g = non_null(graph, "graph")?;
        let flat: Vec<usize> = g.0.edges().iter().flat_map(|&(i, j)| [i, j]).collect();
        fill(&flat, buf, capacity, written)
    })
}

/// Writes the row-major `n x n` renormalized aggregator.
#[no_mangle]
pub extern "C" fn gcfs_graph_aggregator(
    graph: *const GcfsGraph,
    buf: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> GcfsStatus {
    guard(|| {
        let g = non_null(graph, "graph")?;
        fill(Aggregator::new(&g.0).as_slice(), buf, capacity, written)
    })
}

#[no_mangle]
pub extern "C" fn gcfs_graph_free(graph: *mut GcfsGraph) {
    if !graph.is_null() {
        // SAFETY: created by Box::into_raw in this library, freed once.
        drop(unsafe { Box::from_raw(graph) });
    }
}

/// PSNR in dB between two images of identical dimensions.
#[no_mangle]
pub extern "C" fn gcfs_psnr(
    a: *const f64,
    b: *const f64,
    width: usize,
    height: usize,
    channels: usize,
    peak: f64,
    out: *mut f64,
) -> GcfsStatus {
    guard(|| {
        let (a, b) = (
            image_arg(a, width, height, channels)?,
            image_arg(b, width, height, channels)?,
        );
        write_out(out, gcfs::metrics::psnr(&a, &b, peak).or_status()?)
    })
}

/// Mean SSIM on luma. `global_fallback` (may be null) is set to 1 when the
/// image is smaller than the 11x11 window.
#[no_mangle]
pub extern "C" fn gcfs_ssim(
    a: *const f64,
    b: *const f64,
    width: usize,
    height: usize,
    channels: usize,
    out: *mut f64,
    global_fallback: *mut i32,
) -> GcfsStatus {
    guard(|| {
        let (a, b) = (
            image_arg(a, width, height, channels)?,
            image_arg(b, width, height, channels)?,
        );
        let s = gcfs::metrics::ssim(&a, &b).or_status()?;
        if !global_fallback.is_null() {
            write_out(global_fallback, i32::from(s.global_fallback))?;
        }
        write_out(out, s.value)
    })
}

/// Restores the model stored in a training checkpoint.
#[no_mangle]
pub extern "C" fn gcfs_model_load(path: *const c_char, out: *mut *mut GcfsModel) -> GcfsStatus {
    guard(|| {
        let ck = Checkpoint::load(path_arg(path)?).or_status()?;
        write_out(out, Box::into_raw(Box::new(GcfsModel(ck.model))))
    })
}

/// Output size per input pixel side: 1 for deblurring, the scale for SR.
#[no_mangle]
pub extern "C" fn gcfs_model_magnification(model: *const GcfsModel) -> usize {
    // SAFETY: null or a live handle.
    unsafe { model.as_ref() }.map_or(0, |m| m.0.config().magnification())
}

/// Restores one image. `output` receives `channels x (height*s) x (width*s)`
/// values where `s` is [`gcfs_model_magnification`].
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub extern "C" fn gcfs_model_infer(
    model: *const GcfsModel,
    input: *const f64,
    width: usize,
    height: usize,
    channels: usize,
    output: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> GcfsStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let img = image_arg(input, width, height, channels)?;
        let (restored, _) = m.0.infer(&img).or_status()?;
        fill(restored.data(), output, capacity, written)
    })
}

#[no_mangle]
pub extern "C" fn gcfs_model_free(model: *mut GcfsModel) {
    if !model.is_null() {
        // SAFETY: created by Box::into_raw in this library, freed once.
        drop(unsafe { Box::from_raw(model) });
    }
}
