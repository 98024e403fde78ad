//! C ABI over the pipediag engine.
//!
//! Every entry point returns a [`PdStatus`]; results come back through out
//! pointers. On failure the message is kept per thread and can be read with
//! [`pd_last_error`]. Strings handed out by the library must be released
//! with [`pd_string_free`], engines with [`pd_engine_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use pipediag::diagnosis::{classify_fate, Fate};
use pipediag::simulator::{reproduce_paradox, ParadoxSpec, SyntheticAgentConfig};
use pipediag::stats::{
    bow_cosine, cohens_dz, holm_correction, krippendorff_alpha_interval, wilcoxon_signed_rank, PairedSample,
    WilcoxonMode,
};
use pipediag::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Empty = 4,
    Degenerate = 5,
    LengthMismatch = 6,
    Json = 7,
    Engine = 8,
    Panic = 99,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PdFate {
    Amplifier = 0,
    Propagator = 1,
    Compensator = 2,
}

/// Paired-test result written by [`pd_wilcoxon`].
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct PdWilcoxon {
    pub statistic: f64,
    pub p_value: f64,
    pub n_nonzero: usize,
    pub exact: bool,
}

/// Opaque engine holding an agent configuration and run settings.
pub struct PdEngine {
    config: SyntheticAgentConfig,
    spec: ParadoxSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PdStatus {
    match e {
        Error::Empty(_) => PdStatus::Empty,
        Error::Degenerate(_) => PdStatus::Degenerate,
        Error::LengthMismatch(_) => PdStatus::LengthMismatch,
        Error::Json(_) => PdStatus::Json,
        Error::InvalidArgument(_) | Error::SeverityOutOfRange { .. } | Error::UnknownConfiguration(_) => {
            PdStatus::InvalidArgument
        }
        _ => PdStatus::Engine,
    }
}

struct Fail(PdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PdStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PdStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(PdStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `ptr` must be null or point to `len` readable doubles.
unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string.
unsafe fn text<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|e| Fail(PdStatus::InvalidUtf8, format!("{what}: {e}")))
}

/// # Safety
/// `out` must be null or writable.
unsafe fn put<T>(out: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(v);
    Ok(())
}

fn owned_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|e| Fail(PdStatus::Engine, e.to_string()))
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn pd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static version string; do not free.
#[no_mangle]
pub extern "C" fn pd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// F = −Σ ln(1 − s_i) over `len` severities.
///
/// # Safety
/// `sev` points to `len` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pd_failure_index(sev: *const f64, len: usize, out: *mut f64) -> PdStatus {
    guard(|| {
        let v = slice(sev, len, "sev")?;
        put(out, pipediag::scoring::failure_index(v)?, "out")
    })
}

/// Wilcoxon signed-rank on paired differences; exact when small enough.
///
/// # Safety
/// `diffs` points to `len` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pd_wilcoxon(diffs: *const f64, len: usize, out: *mut PdWilcoxon) -> PdStatus {
    guard(|| {
        let d = slice(diffs, len, "diffs")?;
        let r = wilcoxon_signed_rank(&PairedSample::from_differences(d), WilcoxonMode::Auto)?;
        put(
            out,
            PdWilcoxon {
                statistic: r.statistic,
                p_value: r.p_value,
                n_nonzero: r.n,
                exact: r.exact,
            },
            "out",
        )
    })
}

/// Holm-adjusted p-values written to `out` in input order.
///
/// # Safety
/// `raw` and `out` each hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pd_holm(raw: *const f64, len: usize, out: *mut f64) -> PdStatus {
    guard(|| {
        let r = slice(raw, len, "raw")?;
        let adj = holm_correction(r)?;
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&adj);
        Ok(())
    })
}

/// Paired effect size d_z of `len` differences.
///
/// # Safety
/// `diffs` points to `len` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pd_cohens_dz(diffs: *const f64, len: usize, out: *mut f64) -> PdStatus {
    guard(|| {
        let d = slice(diffs, len, "diffs")?;
        put(out, cohens_dz(&PairedSample::from_differences(d))?, "out")
    })
}

/// Interval Krippendorff alpha for two raters over `len` units.
///
/// # Safety
/// `a` and `b` each hold `len` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pd_krippendorff_alpha(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> PdStatus {
    guard(|| {
        let (a, b) = (slice(a, len, "a")?, slice(b, len, "b")?);
        put(out, krippendorff_alpha_interval(a, b)?, "out")
    })
}

/// Bag-of-words cosine between two UTF-8 strings.
///
/// # Safety
/// `a` and `b` are NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pd_bow_cosine(a: *const c_char, b: *const c_char, out: *mut f64) -> PdStatus {
    guard(|| put(out, bow_cosine(text(a, "a")?, text(b, "b")?), "out"))
}

/// Fate of a module given its indirect effect and threshold τ.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pd_classify_fate(nie: f64, tau: f64, out: *mut PdFate) -> PdStatus {
    guard(|| {
        if !nie.is_finite() || !(tau.is_finite() && tau >= 0.0) {
            return Err(Fail(PdStatus::InvalidArgument, format!("nie {nie}, tau {tau}")));
        }
        let f = match classify_fate(nie, tau).label {
            Fate::Amplifier => PdFate::Amplifier,
            Fate::Propagator => PdFate::Propagator,
            Fate::Compensator => PdFate::Compensator,
        };
        put(out, f, "out")
    })
}

/// Builds an engine from a synthetic-agent config (JSON object, `{}` for
/// defaults) and optional run settings (null for defaults).
///
/// # Safety
/// `config_json` is NUL-terminated; `spec_json` is null or NUL-terminated;
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pd_engine_new(
    config_json: *const c_char,
    spec_json: *const c_char,
    out: *mut *mut PdEngine,
) -> PdStatus {
    guard(|| {
        let config = SyntheticAgentConfig::from_json(text(config_json, "config_json")?)?;
        let spec = if spec_json.is_null() {
            ParadoxSpec::default()
        } else {
            serde_json::from_str(text(spec_json, "spec_json")?).map_err(Error::from)?
        };
        put(out, Box::into_raw(Box::new(PdEngine { config, spec })), "out")
    })
}

/// Releases an engine. Null is ignored.
///
/// # Safety
/// `engine` must come from [`pd_engine_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn pd_engine_free(engine: *mut PdEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Runs diagnosis and the configuration sweep; writes the report as a JSON
/// string the caller frees with [`pd_string_free`].
///
/// # Safety
/// `engine` is a live engine; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn pd_engine_run_paradox(engine: *const PdEngine, out_json: *mut *mut c_char) -> PdStatus {
    guard(|| {
        let e = engine.as_ref().ok_or_else(|| null("engine"))?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let run = reproduce_paradox(&e.config, &e.spec)?;
        let json = serde_json::to_string(&run.report).map_err(Error::from)?;
        put(out_json, owned_string(json)?, "out_json")
    })
}
