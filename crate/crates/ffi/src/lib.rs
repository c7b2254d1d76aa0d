//! C ABI over the sparse engine, the budget calculator and the latent
//! quantizer.
//!
//! Every fallible function returns a status code (`DKV_OK` or a negative
//! `DKV_ERR_*`). After a failure, `dkv_last_error` returns a message that
//! stays valid until the next call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use deltakv::controller::{compute_budget_ratios, BudgetInputs, Engine, EngineConfig};
use deltakv::quant::{dequantize_token, quantize_token, quantized_bytes, QuantizedLatent};
use deltakv::Error;

pub const DKV_OK: i32 = 0;
pub const DKV_ERR_NULL: i32 = -1;
pub const DKV_ERR_INPUT: i32 = -2;
pub const DKV_ERR_SHAPE: i32 = -3;
pub const DKV_ERR_CONFIG: i32 = -4;
pub const DKV_ERR_POOL: i32 = -5;
pub const DKV_ERR_RUNTIME: i32 = -6;
pub const DKV_ERR_BUFFER: i32 = -7;
pub const DKV_ERR_PANIC: i32 = -8;

/// Opaque engine handle.
pub struct DkvEngine {
    engine: Engine<f32>,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DkvBudgetRatios {
    pub kr: f64,
    pub cr: f64,
    pub budget: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn code_for(e: &Error) -> i32 {
    match e {
        Error::Shape(_) => DKV_ERR_SHAPE,
        Error::Input(_) | Error::Index(_) | Error::Ordering(_) | Error::Format(_) | Error::Json(_) => DKV_ERR_INPUT,
        Error::Config(_) => DKV_ERR_CONFIG,
        Error::PoolExhausted(_) => DKV_ERR_POOL,
        _ => DKV_ERR_RUNTIME,
    }
}

struct Fail(i32, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(code_for(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DKV_ERR_NULL, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DKV_OK,
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            DKV_ERR_PANIC
        }
    }
}

unsafe fn engine_mut<'a>(h: *mut DkvEngine) -> Result<&'a mut DkvEngine, Fail> {
    // SAFETY: caller passes a handle from `dkv_engine_new` or null.
    unsafe { h.as_mut() }.ok_or_else(|| null("engine"))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: caller guarantees `p` points to `n` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(p, n) })
}

unsafe fn write_out<T: Copy>(src: &[T], out: *mut T, cap: usize) -> Result<(), Fail> {
    if out.is_null() {
        return Ok(());
    }
    if cap < src.len() {
        return Err(Fail(DKV_ERR_BUFFER, format!("buffer holds {cap}, need {}", src.len())));
    }
    // SAFETY: caller guarantees `out` has room for `cap` elements.
    unsafe { ptr::copy_nonoverlapping(src.as_ptr(), out, src.len()) };
    Ok(())
}

/// Message of the last failure on this thread, or null.
#[no_mangle]
pub extern "C" fn dkv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds an engine from a JSON engine configuration (null selects the
/// defaults) and stores the handle in `*out`.
///
/// # Safety
/// `config_json` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dkv_engine_new(config_json: *const c_char, out: *mut *mut DkvEngine) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config: EngineConfig = if config_json.is_null() {
            EngineConfig::default()
        } else {
            // SAFETY: checked non-null; caller guarantees NUL termination.
            let text = unsafe { CStr::from_ptr(config_json) }
                .to_str()
                .map_err(|_| Fail(DKV_ERR_INPUT, "config is not UTF-8".into()))?;
            serde_json::from_str(text).map_err(Error::from)?
        };
        let engine = Engine::from_config(&config)?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(DkvEngine { engine })) };
        Ok(())
    })
}

/// # Safety
/// `h` is null or a handle from `dkv_engine_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dkv_engine_free(h: *mut DkvEngine) {
    if !h.is_null() {
        // SAFETY: the handle came from `Box::into_raw` in `dkv_engine_new`.
        drop(unsafe { Box::from_raw(h) });
    }
}

/// Vocabulary size, i.e. the logits length.
///
/// # Safety
/// `h` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dkv_engine_vocab(h: *mut DkvEngine, out: *mut usize) -> i32 {
    guard(|| {
        let e = unsafe { engine_mut(h) }?;
        // SAFETY: caller guarantees `out` is writable when non-null.
        unsafe { out.as_mut() }.map(|o| *o = e.engine.model().config.vocab).ok_or_else(|| null("out"))
    })
}

/// Number of tokens processed by the current request.
///
/// # Safety
/// `h` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dkv_engine_len(h: *mut DkvEngine, out: *mut usize) -> i32 {
    guard(|| {
        let e = unsafe { engine_mut(h) }?;
        // SAFETY: caller guarantees `out` is writable when non-null.
        unsafe { out.as_mut() }.map(|o| *o = e.engine.len()).ok_or_else(|| null("out"))
    })
}

/// Prefills `n_tokens` tokens in chunks of `chunk_len`. When `logits_out` is
/// non-null, the last position's logits are written there (`logits_cap` must
/// be at least the vocabulary size).
///
/// # Safety
/// `h` is a live handle; `tokens` holds `n_tokens` values; `logits_out` is
/// null or has room for `logits_cap` floats.
#[no_mangle]
pub unsafe extern "C" fn dkv_engine_prefill(
    h: *mut DkvEngine,
    tokens: *const u32,
    n_tokens: usize,
    chunk_len: usize,
    logits_out: *mut f32,
    logits_cap: usize,
) -> i32 {
    guard(|| {
        let e = unsafe { engine_mut(h) }?;
        let toks = unsafe { slice(tokens, n_tokens, "tokens") }?;
        if let Some(logits) = e.engine.prefill(toks, chunk_len)? {
            unsafe { write_out(&logits, logits_out, logits_cap) }?;
        }
        Ok(())
    })
}

/// Appends one token and writes its logits.
///
/// # Safety
/// As for `dkv_engine_prefill`.
#[no_mangle]
pub unsafe extern "C" fn dkv_engine_decode(h: *mut DkvEngine, token: u32, logits_out: *mut f32, logits_cap: usize) -> i32 {
    guard(|| {
        let e = unsafe { engine_mut(h) }?;
        let logits = e.engine.decode_step(token)?;
        unsafe { write_out(&logits, logits_out, logits_cap) }
    })
}

/// Drops the current request and starts an empty one.
///
/// # Safety
/// `h` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn dkv_engine_reset(h: *mut DkvEngine) -> i32 {
    guard(|| {
        let e = unsafe { engine_mut(h) }?;
        Ok(e.engine.reset()?)
    })
}

/// Memory audit of the current request as a JSON string owned by the
/// library; release it with `dkv_string_free`.
///
/// # Safety
/// `h` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dkv_engine_memory_report(h: *mut DkvEngine, out: *mut *mut c_char) -> i32 {
    guard(|| {
        let e = unsafe { engine_mut(h) }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let audit = e.engine.cache().memory_audit(e.engine.request_id())?;
        let json = serde_json::to_string(&audit).map_err(Error::from)?;
        let c = CString::new(json).map_err(|_| Fail(DKV_ERR_RUNTIME, "report contains NUL".into()))?;
        // SAFETY: checked non-null above.
        unsafe { *out = c.into_raw() };
        Ok(())
    })
}

/// # Safety
/// `s` is null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dkv_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: `s` came from `CString::into_raw`.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Keep ratio, compute ratio and budget for a layer layout.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn dkv_budget_ratios(
    l_full: usize,
    l_total: usize,
    stride: usize,
    latent_ratio: f64,
    q: f64,
    budget: f64,
    out: *mut DkvBudgetRatios,
) -> i32 {
    guard(|| {
        let r = compute_budget_ratios(&BudgetInputs { l_full, l_total, stride, latent_ratio, q, budget })?;
        // SAFETY: caller guarantees `out` is writable when non-null.
        let o = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *o = DkvBudgetRatios { kr: r.kr, cr: r.cr, budget: r.budget };
        Ok(())
    })
}

/// Byte size of one quantized latent of width `latent_dim`.
#[no_mangle]
pub extern "C" fn dkv_quantized_bytes(latent_dim: usize) -> usize {
    quantized_bytes(latent_dim)
}

/// Quantizes `latent_dim` floats into `dkv_quantized_bytes(latent_dim)` bytes.
///
/// # Safety
/// `z` holds `latent_dim` floats; `out` has room for `out_cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn dkv_quantize(z: *const f32, latent_dim: usize, out: *mut u8, out_cap: usize) -> i32 {
    guard(|| {
        let v = unsafe { slice(z, latent_dim, "z") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = quantize_token(v).to_bytes();
        unsafe { write_out(&bytes, out, out_cap) }
    })
}

/// Inverse of `dkv_quantize`.
///
/// # Safety
/// `bytes` holds `n_bytes` bytes; `out` has room for `latent_dim` floats.
#[no_mangle]
pub unsafe extern "C" fn dkv_dequantize(bytes: *const u8, n_bytes: usize, latent_dim: usize, out: *mut f32) -> i32 {
    guard(|| {
        let raw = unsafe { slice(bytes, n_bytes, "bytes") }?;
        if out.is_null() {
            return Err(null("out"));
        }
        if n_bytes != quantized_bytes(latent_dim) {
            return Err(Fail(DKV_ERR_SHAPE, format!("{n_bytes} bytes cannot hold a width-{latent_dim} latent")));
        }
        let q = QuantizedLatent::from_bytes(raw)?;
        let z: Vec<f32> = dequantize_token(&q, latent_dim)?;
        unsafe { write_out(&z, out, latent_dim) }
    })
}
