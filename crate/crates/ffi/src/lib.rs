//! C ABI over `fim-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_read`
//! style constructors and released with the matching `*_free`. Every fallible
//! call returns a [`FimStatus`]; on failure the message is available from
//! [`fim_last_error_message`] on the same thread. Panics never unwind into C,
//! they are reported as `FIM_PANIC`.

#![allow(non_camel_case_types)]

use std::cell::RefCell;
use std::ffi::{c_char, c_double, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use fim_core::bench::{self, Command, Experiment, ExperimentConfig};
use fim_core::estimation::{RecoveryResult, SparseProblem};
use fim_core::interference::{expected_bounds, pbf_only_objective, solve_multi_element_single_path, upper_bound, Mode};
use fim_core::model::{received_power, Aperture, ChannelRealization, ChannelSpec, FimGeometry, PhaseVector};
use fim_core::recovery::{recover, Algorithm, RecoverySettings};
use fim_core::{Complex64, FimError};

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FimStatus {
    FIM_OK = 0,
    FIM_INVALID_INPUT = 1,
    FIM_INFEASIBLE = 2,
    FIM_NUMERICAL = 3,
    FIM_NULL_POINTER = 4,
    FIM_PANIC = 5,
    FIM_IO = 6,
}

/// Optimization modes for [`fim_solve_single_path`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FimMode {
    FIM_MODE_PBF_ONLY = 0,
    FIM_MODE_EM_ONLY = 1,
    FIM_MODE_EM_PBF = 2,
}

/// Recovery algorithms for [`fim_recover`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FimAlgorithm {
    FIM_ALG_OMP = 0,
    FIM_ALG_FISTA = 1,
    FIM_ALG_VSBL = 2,
    FIM_ALG_MFVSBL = 3,
    FIM_ALG_CMFVSBL = 4,
}

/// Opaque channel realization.
pub struct FimChannel {
    inner: ChannelRealization,
}

/// Opaque sparse recovery problem.
pub struct FimProblem {
    inner: SparseProblem,
}

/// Opaque recovery result.
pub struct FimRecovery {
    inner: RecoveryResult,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean: String = msg.chars().filter(|c| *c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).expect("nul bytes removed"));
}

fn status_of(e: &FimError) -> FimStatus {
    match e {
        FimError::Infeasible(_) | FimError::DegenerateGeometry(_) => FimStatus::FIM_INFEASIBLE,
        FimError::Conditioning(_) | FimError::UndefinedMetric(_) => FimStatus::FIM_NUMERICAL,
        FimError::Io(_) => FimStatus::FIM_IO,
        _ => FimStatus::FIM_INVALID_INPUT,
    }
}

enum Failure {
    Null(&'static str),
    Core(FimError),
}

impl From<FimError> for Failure {
    fn from(e: FimError) -> Self {
        Failure::Core(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> FimStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FimStatus::FIM_OK,
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            FimStatus::FIM_NULL_POINTER
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            FimStatus::FIM_PANIC
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> std::result::Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> std::result::Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> std::result::Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> std::result::Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn boxed<T>(value: T, dst: &mut *mut T) {
    *dst = Box::into_raw(Box::new(value));
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread ("" after a success).
/// Valid until the next `fim_*` call on the same thread.
#[no_mangle]
pub extern "C" fn fim_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// One cascaded path with gain `g`, virtual angles `(theta, phi)` and
/// direct gain `gamma`.
///
/// # Safety
/// `out_channel` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fim_channel_single_path(
    gain_re: c_double,
    gain_im: c_double,
    theta: c_double,
    phi: c_double,
    direct_re: c_double,
    direct_im: c_double,
    out_channel: *mut *mut FimChannel,
) -> FimStatus {
    guard(|| {
        let dst = out(out_channel, "out_channel")?;
        let inner = ChannelRealization::single_path(
            Complex64::new(gain_re, gain_im),
            theta,
            phi,
            Complex64::new(direct_re, direct_im),
        )?;
        boxed(FimChannel { inner }, dst);
        Ok(())
    })
}

/// Random channel with `L` BS paths, `P` user paths and the given gain
/// standard deviations, drawn from `seed`.
///
/// # Safety
/// `out_channel` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fim_channel_sample(
    bs_paths: usize,
    user_paths: usize,
    sigma_alpha: c_double,
    sigma_beta: c_double,
    sigma_gamma: c_double,
    seed: u64,
    out_channel: *mut *mut FimChannel,
) -> FimStatus {
    guard(|| {
        let dst = out(out_channel, "out_channel")?;
        let inner = ChannelSpec::new(bs_paths, user_paths, sigma_alpha, sigma_beta, sigma_gamma).sample_seeded(seed)?;
        boxed(FimChannel { inner }, dst);
        Ok(())
    })
}

/// Number of cascaded paths.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn fim_channel_num_paths(channel: *const FimChannel, out_paths: *mut usize) -> FimStatus {
    guard(|| {
        *out(out_paths, "out_paths")? = deref(channel, "channel")?.inner.num_paths();
        Ok(())
    })
}

/// # Safety
/// `channel` must come from a `fim_channel_*` constructor (or be null).
#[no_mangle]
pub unsafe extern "C" fn fim_channel_free(channel: *mut FimChannel) {
    if !channel.is_null() {
        drop(Box::from_raw(channel));
    }
}

/// Received power `|h_cas + gamma|^2` for `n` elements at `(x, z)` with
/// phases `v`.
///
/// # Safety
/// `x`, `z`, `v` must point to `n` doubles; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn fim_received_power(
    channel: *const FimChannel,
    x: *const c_double,
    z: *const c_double,
    v: *const c_double,
    n: usize,
    wavelength: c_double,
    out_power: *mut c_double,
) -> FimStatus {
    guard(|| {
        let ch = deref(channel, "channel")?;
        let dst = out(out_power, "out_power")?;
        let (x, z, v) = (slice(x, n, "x")?, slice(z, n, "z")?, slice(v, n, "v")?);
        let ap = Aperture::new(wavelength, f64::INFINITY, 0.0)?;
        let geometry = FimGeometry::new(x.to_vec(), z.to_vec(), ap)?;
        *dst = received_power(&geometry, &PhaseVector::new(v.to_vec())?, &ch.inner)?;
        Ok(())
    })
}

/// PBF-only optimum `(|gamma| + N |sum g|)^2` and upper bound
/// `(|gamma| + N sum |g|)^2` for `n` elements.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn fim_power_bounds(
    channel: *const FimChannel,
    n: usize,
    out_pbf: *mut c_double,
    out_upper: *mut c_double,
) -> FimStatus {
    guard(|| {
        let ch = &deref(channel, "channel")?.inner;
        *out(out_pbf, "out_pbf")? = pbf_only_objective(ch, n);
        *out(out_upper, "out_upper")? = upper_bound(ch, n);
        Ok(())
    })
}

/// Closed-form expectations of the PBF-only optimum and of the upper bound.
///
/// # Safety
/// Output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn fim_expected_bounds(
    bs_paths: usize,
    user_paths: usize,
    n: usize,
    sigma_alpha: c_double,
    sigma_beta: c_double,
    sigma_gamma: c_double,
    out_pbf: *mut c_double,
    out_upper: *mut c_double,
) -> FimStatus {
    guard(|| {
        if bs_paths == 0 || user_paths == 0 || n == 0 {
            return Err(FimError::InvalidInput("L, P and N must be at least 1".into()).into());
        }
        let e = expected_bounds(bs_paths, user_paths, n, sigma_alpha, sigma_beta, sigma_gamma);
        *out(out_pbf, "out_pbf")? = e.pbf;
        *out(out_upper, "out_upper")? = e.upper;
        Ok(())
    })
}

/// Closed-form optimum of a single-path channel with `n` elements inside
/// `[-region, region]^2`. Writes positions and phases (`n` each) and the
/// objective.
///
/// # Safety
/// `out_x`, `out_z`, `out_v` must hold `n` doubles; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn fim_solve_single_path(
    channel: *const FimChannel,
    n: usize,
    wavelength: c_double,
    region: c_double,
    d_min: c_double,
    mode: FimMode,
    out_x: *mut c_double,
    out_z: *mut c_double,
    out_v: *mut c_double,
    out_objective: *mut c_double,
) -> FimStatus {
    guard(|| {
        let ch = deref(channel, "channel")?;
        let objective = out(out_objective, "out_objective")?;
        let (xs, zs, vs) = (slice_mut(out_x, n, "out_x")?, slice_mut(out_z, n, "out_z")?, slice_mut(out_v, n, "out_v")?);
        let mode = match mode {
            FimMode::FIM_MODE_PBF_ONLY => Mode::PbfOnly,
            FimMode::FIM_MODE_EM_ONLY => Mode::EmOnly,
            FimMode::FIM_MODE_EM_PBF => Mode::EmPbf,
        };
        let ap = Aperture::new(wavelength, region, d_min)?;
        let sol = solve_multi_element_single_path(&ch.inner, n, &ap, mode)?;
        xs.copy_from_slice(sol.geometry.x());
        zs.copy_from_slice(sol.geometry.z());
        vs.copy_from_slice(sol.phases.as_slice());
        *objective = sol.objective;
        Ok(())
    })
}

/// Loads a problem from its binary encoding.
///
/// # Safety
/// `bytes` must point to `len` bytes; `out_problem` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fim_problem_from_bytes(bytes: *const u8, len: usize, out_problem: *mut *mut FimProblem) -> FimStatus {
    guard(|| {
        let dst = out(out_problem, "out_problem")?;
        let inner = SparseProblem::from_bytes(slice(bytes, len, "bytes")?)?;
        boxed(FimProblem { inner }, dst);
        Ok(())
    })
}

/// Loads a problem file written by `SparseProblem::write_to`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_problem` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fim_problem_read(path: *const c_char, out_problem: *mut *mut FimProblem) -> FimStatus {
    guard(|| {
        let dst = out(out_problem, "out_problem")?;
        if path.is_null() {
            return Err(Failure::Null("path"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| FimError::InvalidInput("path is not UTF-8".into()))?;
        let file = std::fs::File::open(path).map_err(FimError::from)?;
        let inner = SparseProblem::read_from(std::io::BufReader::new(file))?;
        boxed(FimProblem { inner }, dst);
        Ok(())
    })
}

/// Dictionary size: `rows` measurements by `atoms` columns.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn fim_problem_dims(problem: *const FimProblem, out_rows: *mut usize, out_atoms: *mut usize) -> FimStatus {
    guard(|| {
        let p = &deref(problem, "problem")?.inner;
        *out(out_rows, "out_rows")? = p.rows();
        *out(out_atoms, "out_atoms")? = p.atoms();
        Ok(())
    })
}

/// # Safety
/// `problem` must come from a `fim_problem_*` constructor (or be null).
#[no_mangle]
pub unsafe extern "C" fn fim_problem_free(problem: *mut FimProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Runs one recovery algorithm with default settings. `sparsity` is the OMP
/// iteration count (ignored by the other algorithms); `seed` drives the
/// clustering of CMFV-SBL.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn fim_recover(
    problem: *const FimProblem,
    algorithm: FimAlgorithm,
    sparsity: usize,
    seed: u64,
    out_recovery: *mut *mut FimRecovery,
) -> FimStatus {
    guard(|| {
        let p = &deref(problem, "problem")?.inner;
        let dst = out(out_recovery, "out_recovery")?;
        let alg = match algorithm {
            FimAlgorithm::FIM_ALG_OMP => Algorithm::Omp,
            FimAlgorithm::FIM_ALG_FISTA => Algorithm::Fista,
            FimAlgorithm::FIM_ALG_VSBL => Algorithm::Vsbl,
            FimAlgorithm::FIM_ALG_MFVSBL => Algorithm::Mfvsbl,
            FimAlgorithm::FIM_ALG_CMFVSBL => Algorithm::Cmfvsbl,
        };
        let settings = RecoverySettings { sparsity, cluster_seed: seed, ..Default::default() };
        boxed(FimRecovery { inner: recover(p, alg, &settings)? }, dst);
        Ok(())
    })
}

/// Copies the coefficient estimate into `re`/`im` (`len` must equal the
/// number of atoms).
///
/// # Safety
/// `re` and `im` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fim_recovery_coefficients(
    recovery: *const FimRecovery,
    re: *mut c_double,
    im: *mut c_double,
    len: usize,
) -> FimStatus {
    guard(|| {
        let r = &deref(recovery, "recovery")?.inner;
        if len != r.xi_hat.len() {
            return Err(FimError::DimensionMismatch { what: "coefficient buffer", expected: r.xi_hat.len(), got: len }.into());
        }
        let (re, im) = (slice_mut(re, len, "re")?, slice_mut(im, len, "im")?);
        for (i, c) in r.xi_hat.iter().enumerate() {
            re[i] = c.re;
            im[i] = c.im;
        }
        Ok(())
    })
}

/// Direct-channel estimate, iteration count and convergence flag.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn fim_recovery_summary(
    recovery: *const FimRecovery,
    out_direct_re: *mut c_double,
    out_direct_im: *mut c_double,
    out_iterations: *mut usize,
    out_converged: *mut bool,
) -> FimStatus {
    guard(|| {
        let r = &deref(recovery, "recovery")?.inner;
        *out(out_direct_re, "out_direct_re")? = r.direct_estimate.re;
        *out(out_direct_im, "out_direct_im")? = r.direct_estimate.im;
        *out(out_iterations, "out_iterations")? = r.iterations;
        *out(out_converged, "out_converged")? = r.converged;
        Ok(())
    })
}

/// # Safety
/// `recovery` must come from [`fim_recover`] (or be null).
#[no_mangle]
pub unsafe extern "C" fn fim_recovery_free(recovery: *mut FimRecovery) {
    if !recovery.is_null() {
        drop(Box::from_raw(recovery));
    }
}

/// Runs the experiment described by a JSON config and returns its main
/// artifact (CSV or JSON text). Free the string with [`fim_string_free`].
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out_text` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fim_run_experiment(config_json: *const c_char, out_text: *mut *mut c_char) -> FimStatus {
    guard(|| {
        let dst = out(out_text, "out_text")?;
        if config_json.is_null() {
            return Err(Failure::Null("config_json"));
        }
        let text = CStr::from_ptr(config_json).to_str().map_err(|_| FimError::Config("config is not UTF-8".into()))?;
        let cfg = ExperimentConfig::from_json(text)?;
        let command = match cfg.experiment {
            Experiment::Fringe => Command::Fringe,
            Experiment::PowerVsPaths => Command::Power,
            Experiment::Bounds => Command::Bounds,
            Experiment::NmseVsQ | Experiment::NmseVsSnr => Command::Nmse,
            Experiment::Runtime => Command::Runtime,
        };
        let body = bench::run(command, &cfg)?.artifact.render();
        *dst = CString::new(body).map_err(|_| FimError::Format("output contains NUL".into()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from a `fim_*` call that documents this release (or be null).
#[no_mangle]
pub unsafe extern "C" fn fim_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
