//! C ABI over `sida-core`.
//!
//! Objects are opaque handles created by `*_new`/`*_from_*` functions and
//! released with the matching `*_free`. Every fallible function returns a
//! [`SidaStatus`]; the message of the last failure on the calling thread is
//! available from [`sida_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sida_core::analytic::MixtureModel;
use sida_core::config::RunConfig;
use sida_core::diffmath::Tensor;
use sida_core::trainer::run_training;
use sida_core::{eval, presets, Error};

/// Status codes. Values match the `sida` command's exit statuses where
/// they overlap.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SidaStatus {
    Ok = 0,
    NullArgument = 1,
    Config = 2,
    Numeric = 3,
    Io = 4,
    Invalid = 5,
    Panic = 6,
}

/// A run configuration.
pub struct SidaConfig(RunConfig);

/// A Gaussian mixture data model.
pub struct SidaModel(MixtureModel);

/// Final numbers of a completed training run.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct SidaRunSummary {
    pub images_seen: u64,
    pub generator_steps: u64,
    pub fake_score_steps: u64,
    /// EMA generator against held-out data.
    pub energy_distance: f64,
    pub sliced_wasserstein: f64,
    pub frechet_feature_distance: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SidaStatus {
    match e {
        Error::Config { .. } | Error::Checkpoint(_) | Error::Stage(_) => SidaStatus::Config,
        Error::Io { .. } => SidaStatus::Io,
        e if e.is_numeric() => SidaStatus::Numeric,
        _ => SidaStatus::Invalid,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (SidaStatus, String)>) -> SidaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SidaStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SidaStatus::Panic
        }
    }
}

fn core_err(e: Error) -> (SidaStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SidaStatus, String) {
    (SidaStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SidaStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SidaStatus::Invalid, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sida_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Parses a TOML run configuration.
///
/// # Safety
/// `toml` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sida_config_from_toml(toml: *const c_char, out: *mut *mut SidaConfig) -> SidaStatus {
    guard(|| {
        let text = str_arg(toml, "toml")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = RunConfig::from_toml_str(text).map_err(core_err)?;
        *out = Box::into_raw(Box::new(SidaConfig(cfg)));
        Ok(())
    })
}

/// Loads a shipped preset such as `ring-8/corrupted-sida`.
///
/// # Safety
/// `name` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sida_config_from_preset(name: *const c_char, out: *mut *mut SidaConfig) -> SidaStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = presets::load(name).map_err(core_err)?;
        *out = Box::into_raw(Box::new(SidaConfig(cfg)));
        Ok(())
    })
}

/// Applies one `section.key=value` override.
///
/// # Safety
/// `cfg` must come from this library; `assignment` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn sida_config_set(cfg: *mut SidaConfig, assignment: *const c_char) -> SidaStatus {
    guard(|| {
        let a = str_arg(assignment, "assignment")?;
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        cfg.0 = cfg.0.with_overrides(&[a.to_string()]).map_err(core_err)?;
        Ok(())
    })
}

/// Checks the configuration without running it.
///
/// # Safety
/// `cfg` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn sida_config_validate(cfg: *const SidaConfig) -> SidaStatus {
    guard(|| cfg.as_ref().ok_or_else(|| null("cfg"))?.0.validate().map_err(core_err))
}

/// Writes the 64 hex digits of the checkpoint compatibility hash and a
/// terminating nul into `buf`, which must hold at least 65 bytes.
///
/// # Safety
/// `cfg` must come from this library; `buf` must be writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sida_config_compat_hash(cfg: *const SidaConfig, buf: *mut c_char, len: usize) -> SidaStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let h = cfg.0.compat_hash().map_err(core_err)?;
        if len < h.len() + 1 {
            return Err((SidaStatus::Invalid, format!("buffer of {len} bytes is too small")));
        }
        std::ptr::copy_nonoverlapping(h.as_ptr() as *const c_char, buf, h.len());
        *buf.add(h.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library or be null; it must not be used again.
#[no_mangle]
pub unsafe extern "C" fn sida_config_free(cfg: *mut SidaConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Trains into `out_dir` (or the configured output directory when null).
///
/// # Safety
/// `cfg` must come from this library; `out_dir` must be null or
/// nul-terminated; `summary` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn sida_train(
    cfg: *const SidaConfig,
    out_dir: *const c_char,
    summary: *mut SidaRunSummary,
) -> SidaStatus {
    guard(|| {
        let mut cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?.0.clone();
        if !out_dir.is_null() {
            cfg.out_dir = Some(Path::new(str_arg(out_dir, "out_dir")?).to_path_buf());
        }
        let s = run_training(&cfg).map_err(core_err)?;
        if let Some(out) = summary.as_mut() {
            *out = SidaRunSummary {
                images_seen: s.images_seen,
                generator_steps: s.generator_steps,
                fake_score_steps: s.fake_score_steps,
                energy_distance: s.final_metrics.energy_distance,
                sliced_wasserstein: s.final_metrics.sliced_wasserstein,
                frechet_feature_distance: s.final_metrics.frechet_feature_distance,
            };
        }
        Ok(())
    })
}

/// Loads a named data model (`ring-8`, `grid-25`, `two-moons-gmm`,
/// `gauss-2d`, `patterns-8x8`).
///
/// # Safety
/// `name` must be nul-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn sida_model_from_preset(name: *const c_char, out: *mut *mut SidaModel) -> SidaStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let m = MixtureModel::preset(name).map_err(core_err)?;
        *out = Box::into_raw(Box::new(SidaModel(m)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn sida_model_dim(model: *const SidaModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.dim())
}

/// Posterior means `E[x_0 | x_t]` of `n` row-major points at signal scale
/// `a` and noise `sigma`.
///
/// # Safety
/// `x` and `out` must hold `n * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn sida_model_denoise(
    model: *const SidaModel,
    x: *const f64,
    n: usize,
    a: f64,
    sigma: f64,
    out: *mut f64,
) -> SidaStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        if x.is_null() || out.is_null() {
            return Err(null("x or out"));
        }
        if !(sigma > 0.0) || !(a > 0.0) {
            return Err((SidaStatus::Invalid, "a and sigma must be positive".into()));
        }
        let d = m.dim();
        let xs = std::slice::from_raw_parts(x, n * d);
        let os = std::slice::from_raw_parts_mut(out, n * d);
        for (xi, oi) in xs.chunks_exact(d).zip(os.chunks_exact_mut(d)) {
            oi.copy_from_slice(&m.denoise_point(xi, a, sigma));
        }
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be null; it must not be used again.
#[no_mangle]
pub unsafe extern "C" fn sida_model_free(model: *mut SidaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Energy distance between two row-major sample sets of dimension `dim`.
///
/// # Safety
/// `a` must hold `n_a * dim` doubles, `b` `n_b * dim`, and `out` one.
#[no_mangle]
pub unsafe extern "C" fn sida_energy_distance(
    a: *const f64,
    n_a: usize,
    b: *const f64,
    n_b: usize,
    dim: usize,
    out: *mut f64,
) -> SidaStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(null("a, b or out"));
        }
        let ta = Tensor::new(vec![n_a, dim], std::slice::from_raw_parts(a, n_a * dim).to_vec()).map_err(core_err)?;
        let tb = Tensor::new(vec![n_b, dim], std::slice::from_raw_parts(b, n_b * dim).to_vec()).map_err(core_err)?;
        *out = eval::energy_distance(&ta, &tb).map_err(core_err)?;
        Ok(())
    })
}
