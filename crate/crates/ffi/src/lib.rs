// Licensed under the Apache-2.0 license

//! C ABI over the wisecr library.
//!
//! Every entry point returns a `WisecrStatus`; results come back through out
//! pointers. Scenarios and reports are opaque handles released with their
//! `_free` function. After a non-OK status, `wisecr_last_error` copies a
//! message for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use wisecr::crypto::{mac_compute, mac_verify, skp_decrypt, skp_encrypt, CipherBlockChain, MacTag, SymmetricKey};
use wisecr::power::pam_get;
use wisecr::scenario::{csv_string, run_once, RunRow, Scenario};
use wisecr::server::SessionReport;

/// Status codes. Zero is success, failures are negative.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WisecrStatus {
    Ok = 0,
    NullPointer = -1,
    InvalidUtf8 = -2,
    Config = -3,
    Io = -4,
    Crypto = -5,
    BufferTooSmall = -6,
    Panic = -7,
}

/// Opaque scenario handle.
pub struct WisecrScenario(Scenario);

/// Opaque result of one simulated update session.
pub struct WisecrReport {
    report: SessionReport,
    row: RunRow,
}

/// Execution schedule for a measured Vt. `t_active_ms` is 0 for
/// continuous execution.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WisecrPam {
    pub t_active_ms: u16,
    pub t_lpm_ms: u16,
    pub update_advised: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: WisecrStatus, msg: impl Into<String>) -> i32 {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status as i32
}

/// Runs `f`, mapping a panic to `Panic`.
fn guard(f: impl FnOnce() -> i32) -> i32 {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(WisecrStatus::Panic, "internal panic"))
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, i32> {
    if p.is_null() {
        return Err(fail(WisecrStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(WisecrStatus::InvalidUtf8, "argument is not UTF-8"))
}

unsafe fn bytes_arg<'a>(p: *const u8, len: usize) -> Result<&'a [u8], i32> {
    match (p.is_null(), len) {
        (_, 0) => Ok(&[]),
        (true, _) => Err(fail(WisecrStatus::NullPointer, "null buffer")),
        (false, _) => Ok(std::slice::from_raw_parts(p, len)),
    }
}

unsafe fn key_arg(p: *const u8) -> Result<SymmetricKey, i32> {
    let b = bytes_arg(p, 16)?;
    if b.is_empty() {
        return Err(fail(WisecrStatus::NullPointer, "null key"));
    }
    Ok(SymmetricKey::from_slice(b).expect("16 bytes"))
}

/// Copies `src` into a caller buffer. `written` always receives the full
/// length so callers can size a retry.
unsafe fn copy_out(src: &[u8], out: *mut u8, cap: usize, written: *mut usize) -> i32 {
    if written.is_null() {
        return fail(WisecrStatus::NullPointer, "null length pointer");
    }
    *written = src.len();
    if src.len() > cap {
        return fail(WisecrStatus::BufferTooSmall, format!("need {} bytes", src.len()));
    }
    if !src.is_empty() {
        if out.is_null() {
            return fail(WisecrStatus::NullPointer, "null output buffer");
        }
        std::ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    }
    WisecrStatus::Ok as i32
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(code) => return code,
        }
    };
}

/// Copies the calling thread's last error message, NUL-terminated.
///
/// # Safety
/// `buf` must be writable for `cap` bytes and `written` writable.
#[no_mangle]
pub unsafe extern "C" fn wisecr_last_error(buf: *mut c_char, cap: usize, written: *mut usize) -> i32 {
    let mut msg = LAST_ERROR.with(|e| e.borrow().clone()).into_bytes();
    msg.push(0);
    copy_out(&msg, buf.cast(), cap, written)
}

/// Loads a TOML or JSON scenario file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wisecr_scenario_load(path: *const c_char, out: *mut *mut WisecrScenario) -> i32 {
    guard(|| {
        let path = tri!(str_arg(path));
        if out.is_null() {
            return fail(WisecrStatus::NullPointer, "null out pointer");
        }
        match Scenario::load(Path::new(path)) {
            Ok(sc) => {
                *out = Box::into_raw(Box::new(WisecrScenario(sc)));
                WisecrStatus::Ok as i32
            }
            Err(e) => fail(WisecrStatus::Config, e.to_string()),
        }
    })
}

/// Parses scenario text; `origin` names it in diagnostics and may be null.
///
/// # Safety
/// `text` and a non-null `origin` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wisecr_scenario_parse(
    text: *const c_char,
    origin: *const c_char,
    out: *mut *mut WisecrScenario,
) -> i32 {
    guard(|| {
        let text = tri!(str_arg(text));
        let origin = if origin.is_null() { "<memory>" } else { tri!(str_arg(origin)) };
        if out.is_null() {
            return fail(WisecrStatus::NullPointer, "null out pointer");
        }
        match Scenario::parse(text, origin) {
            Ok(sc) => {
                *out = Box::into_raw(Box::new(WisecrScenario(sc)));
                WisecrStatus::Ok as i32
            }
            Err(e) => fail(WisecrStatus::Config, e.to_string()),
        }
    })
}

/// # Safety
/// `sc` must come from a scenario constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn wisecr_scenario_free(sc: *mut WisecrScenario) {
    if !sc.is_null() {
        drop(Box::from_raw(sc));
    }
}

/// Simulates one update session of `sc` under `seed`.
///
/// # Safety
/// `sc` must be a live scenario handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wisecr_run(sc: *const WisecrScenario, seed: u64, out: *mut *mut WisecrReport) -> i32 {
    guard(|| {
        if sc.is_null() || out.is_null() {
            return fail(WisecrStatus::NullPointer, "null argument");
        }
        let sc = &(*sc).0;
        match run_once(sc, seed) {
            Ok(o) => {
                let row = RunRow::new(&sc.name, seed, &o.report);
                *out = Box::into_raw(Box::new(WisecrReport { report: o.report, row }));
                WisecrStatus::Ok as i32
            }
            Err(e) => fail(WisecrStatus::Io, e.to_string()),
        }
    })
}

/// # Safety
/// `r` must come from `wisecr_run` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn wisecr_report_free(r: *mut WisecrReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Latency in seconds, throughput in bit/s, updated token count and
/// attempts used. Any out pointer may be null.
///
/// # Safety
/// `r` must be a live report handle; non-null out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn wisecr_report_summary(
    r: *const WisecrReport,
    latency_s: *mut f64,
    throughput_bps: *mut f64,
    updated: *mut usize,
    attempts: *mut u32,
) -> i32 {
    if r.is_null() {
        return fail(WisecrStatus::NullPointer, "null report");
    }
    let rep = &(*r).report;
    if !latency_s.is_null() {
        *latency_s = rep.latency_s;
    }
    if !throughput_bps.is_null() {
        *throughput_bps = rep.throughput_bps;
    }
    if !updated.is_null() {
        *updated = rep.updated();
    }
    if !attempts.is_null() {
        *attempts = rep.attempts;
    }
    WisecrStatus::Ok as i32
}

/// The report as a CSV header plus one row, not NUL-terminated.
///
/// # Safety
/// `r` must be a live report handle; `buf` writable for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn wisecr_report_csv(
    r: *const WisecrReport,
    buf: *mut u8,
    cap: usize,
    written: *mut usize,
) -> i32 {
    if r.is_null() {
        return fail(WisecrStatus::NullPointer, "null report");
    }
    copy_out(csv_string(std::slice::from_ref(&(*r).row)).as_bytes(), buf, cap, written)
}

/// CMAC over `msg` under a 16-byte key, written to 16-byte `tag`.
///
/// # Safety
/// `key` readable for 16 bytes, `msg` for `len`, `tag` writable for 16.
#[no_mangle]
pub unsafe extern "C" fn wisecr_mac_compute(key: *const u8, msg: *const u8, len: usize, tag: *mut u8) -> i32 {
    let k = tri!(key_arg(key));
    let m = tri!(bytes_arg(msg, len));
    if tag.is_null() {
        return fail(WisecrStatus::NullPointer, "null tag");
    }
    std::ptr::copy_nonoverlapping(mac_compute(&k, m).as_bytes().as_ptr(), tag, 16);
    WisecrStatus::Ok as i32
}

/// Constant-time tag check; `valid` receives the verdict.
///
/// # Safety
/// `key` and `tag` readable for 16 bytes, `msg` for `len`, `valid` writable.
#[no_mangle]
pub unsafe extern "C" fn wisecr_mac_verify(
    key: *const u8,
    msg: *const u8,
    len: usize,
    tag: *const u8,
    valid: *mut bool,
) -> i32 {
    let k = tri!(key_arg(key));
    let m = tri!(bytes_arg(msg, len));
    let t = tri!(bytes_arg(tag, 16));
    if t.is_empty() || valid.is_null() {
        return fail(WisecrStatus::NullPointer, "null argument");
    }
    *valid = mac_verify(&k, m, &MacTag(t.try_into().expect("16 bytes")));
    WisecrStatus::Ok as i32
}

/// CBC-encrypts with length padding. Output is `len` rounded up to the
/// next multiple of 16, plus 16 when `len` already is one.
///
/// # Safety
/// `key` and `iv` readable for 16 bytes, `pt` for `len`, `out` writable for `cap`.
#[no_mangle]
pub unsafe extern "C" fn wisecr_encrypt(
    key: *const u8,
    iv: *const u8,
    pt: *const u8,
    len: usize,
    out: *mut u8,
    cap: usize,
    written: *mut usize,
) -> i32 {
    let k = tri!(key_arg(key));
    let iv: [u8; 16] = match tri!(bytes_arg(iv, 16)).try_into() {
        Ok(b) => b,
        Err(_) => return fail(WisecrStatus::NullPointer, "null iv"),
    };
    let pt = tri!(bytes_arg(pt, len));
    copy_out(&skp_encrypt(&k, &iv, pt).to_bytes(), out, cap, written)
}

/// Inverse of `wisecr_encrypt`; fails with `Crypto` on bad length or padding.
///
/// # Safety
/// `key` and `iv` readable for 16 bytes, `ct` for `len`, `out` writable for `cap`.
#[no_mangle]
pub unsafe extern "C" fn wisecr_decrypt(
    key: *const u8,
    iv: *const u8,
    ct: *const u8,
    len: usize,
    out: *mut u8,
    cap: usize,
    written: *mut usize,
) -> i32 {
    let k = tri!(key_arg(key));
    let iv: [u8; 16] = match tri!(bytes_arg(iv, 16)).try_into() {
        Ok(b) => b,
        Err(_) => return fail(WisecrStatus::NullPointer, "null iv"),
    };
    let ct = tri!(bytes_arg(ct, len));
    let pt = CipherBlockChain::from_bytes(iv, ct).and_then(|c| skp_decrypt(&k, &c));
    match pt {
        Ok(pt) => copy_out(&pt, out, cap, written),
        Err(e) => fail(WisecrStatus::Crypto, e.to_string()),
    }
}

/// Execution schedule for a SNIFF reading `vt` in volts.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wisecr_pam_get(vt: f64, out: *mut WisecrPam) -> i32 {
    if out.is_null() {
        return fail(WisecrStatus::NullPointer, "null out pointer");
    }
    let p = pam_get(vt);
    *out = WisecrPam {
        t_active_ms: p.t_active_ms.unwrap_or(0),
        t_lpm_ms: p.t_lpm_ms,
        update_advised: p.update_advised,
    };
    WisecrStatus::Ok as i32
}
