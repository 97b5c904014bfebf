//! C ABI over `arraycal`.
//!
//! Scenarios live behind an opaque handle created from TOML text and released
//! with [`arraycal_scenario_free`]. Every fallible call returns an
//! [`ArraycalStatus`]; on failure the message is available from
//! [`arraycal_last_error`] on the same thread. Output arrays are caller-owned
//! and row-major; a buffer that is too short gives
//! `ARRAYCAL_STATUS_BUFFER_TOO_SMALL` and is left untouched.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use arraycal::calibrate::{self, CalibrationError, CalibrationProblem, SolverOptions};
use arraycal::io::{self, ScenarioFile};
use arraycal::jacobian::{self, StateLayout, StateVector};
use arraycal::linalg::RankPolicy;
use arraycal::observability;
use arraycal::scenario::{self, MeasurementSet, NoiseModel};
use arraycal::Error;
use nalgebra::{DVector, Vector3};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArraycalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    InvalidConfig = 4,
    DimensionMismatch = 5,
    DegenerateGeometry = 6,
    BufferTooSmall = 7,
    NotConverged = 8,
    Singular = 9,
    Io = 10,
    Panic = 11,
}

/// A parsed scenario with its noise model.
pub struct ArraycalScenario {
    file: ScenarioFile,
    noise: NoiseModel,
}

/// Sizes needed to allocate output buffers.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct ArraycalDims {
    pub n_arrays: usize,
    pub n_steps: usize,
    /// Unknowns, `8(N−1) + 3K`.
    pub state_dim: usize,
    /// Stacked observation length, `4(N−1)K + 3(K−1)`.
    pub observation_dim: usize,
}

/// Summary of an observability check.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct ArraycalVerdict {
    pub observable: bool,
    pub rank_j: usize,
    pub state_dim: usize,
    pub rank_f: usize,
    pub rank_fbar_prime: usize,
    pub rank_tbar: usize,
    pub necessary_ok: bool,
    pub sufficient: bool,
    /// Number of degenerate configurations detected.
    pub n_degenerate: usize,
}

/// Outcome of a calibration run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct ArraycalSolveInfo {
    pub iterations: usize,
    pub final_cost: f64,
    pub gradient_norm: f64,
    pub converged: bool,
    pub rank_j: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Failure(ArraycalStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::DegenerateGeometry { .. } => ArraycalStatus::DegenerateGeometry,
            Error::InvalidConfig(_) => ArraycalStatus::InvalidConfig,
            Error::DimensionMismatch(_) => ArraycalStatus::DimensionMismatch,
            Error::Parse { .. } => ArraycalStatus::Parse,
            Error::Io { .. } => ArraycalStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: ArraycalStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ArraycalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            ArraycalStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ArraycalStatus::Panic
        }
    }
}

unsafe fn handle<'a>(sc: *const ArraycalScenario) -> Result<&'a ArraycalScenario, Failure> {
    sc.as_ref()
        .ok_or_else(|| fail(ArraycalStatus::NullPointer, "scenario handle is null"))
}

unsafe fn out_slice<'a>(buf: *mut f64, len: usize, need: usize) -> Result<&'a mut [f64], Failure> {
    if buf.is_null() {
        return Err(fail(ArraycalStatus::NullPointer, "output buffer is null"));
    }
    if len < need {
        return Err(fail(
            ArraycalStatus::BufferTooSmall,
            format!("buffer holds {len} values, need {need}"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(buf, need))
}

unsafe fn in_slice<'a>(
    buf: *const f64,
    len: usize,
    need: usize,
    what: &str,
) -> Result<&'a [f64], Failure> {
    if buf.is_null() {
        return Err(fail(ArraycalStatus::NullPointer, format!("{what} is null")));
    }
    if len != need {
        return Err(fail(
            ArraycalStatus::DimensionMismatch,
            format!("{what} has {len} values, expected {need}"),
        ));
    }
    Ok(std::slice::from_raw_parts(buf, len))
}

fn policy(rank_tol: f64) -> RankPolicy {
    if rank_tol > 0.0 {
        RankPolicy::with_tolerance(rank_tol)
    } else {
        RankPolicy::default()
    }
}

fn layout(sc: &ArraycalScenario) -> StateLayout {
    StateLayout::new(sc.file.scenario.n_arrays(), sc.file.scenario.n_steps())
}

fn unstack(layout: StateLayout, m: &[f64]) -> Result<MeasurementSet, Failure> {
    let rows = layout.rows_per_step();
    let y = (1..=layout.n_steps)
        .map(|k| DVector::from_column_slice(&m[layout.measurement_row(k)..][..rows]))
        .collect();
    let odometry = (1..layout.n_steps)
        .map(|k| Vector3::from_column_slice(&m[layout.odometry_row(k)..][..3]))
        .collect();
    Ok(MeasurementSet::new(layout.n_arrays, y, odometry)?)
}

/// Last error message on this thread; empty after a successful call. The
/// pointer stays valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn arraycal_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn arraycal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parse a scenario from TOML text. On success `*out` owns a new handle.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn arraycal_scenario_from_toml(
    toml: *const c_char,
    out: *mut *mut ArraycalScenario,
) -> ArraycalStatus {
    guard(|| {
        if toml.is_null() || out.is_null() {
            return Err(fail(ArraycalStatus::NullPointer, "null argument"));
        }
        let text = CStr::from_ptr(toml)
            .to_str()
            .map_err(|e| fail(ArraycalStatus::InvalidUtf8, e.to_string()))?;
        let file = io::parse_scenario(text, "scenario")?;
        let noise = file.noise_model()?;
        *out = Box::into_raw(Box::new(ArraycalScenario { file, noise }));
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `sc` must come from [`arraycal_scenario_from_toml`] and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn arraycal_scenario_free(sc: *mut ArraycalScenario) {
    if !sc.is_null() {
        drop(Box::from_raw(sc));
    }
}

/// # Safety
/// `sc` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn arraycal_scenario_dims(
    sc: *const ArraycalScenario,
    out: *mut ArraycalDims,
) -> ArraycalStatus {
    guard(|| {
        let sc = handle(sc)?;
        let out = out
            .as_mut()
            .ok_or_else(|| fail(ArraycalStatus::NullPointer, "out is null"))?;
        let l = layout(sc);
        *out = ArraycalDims {
            n_arrays: l.n_arrays,
            n_steps: l.n_steps,
            state_dim: l.state_dim(),
            observation_dim: l.observation_dim(),
        };
        Ok(())
    })
}

/// `rank(J_k)` and `g₂(k)` for each prefix `k = 1..K`; both buffers need
/// `K` entries. `rank_tol <= 0` selects the default relative threshold.
///
/// # Safety
/// `sc` must be a live handle; `ranks` and `state_dims` must hold `len`
/// elements.
#[no_mangle]
pub unsafe extern "C" fn arraycal_rank_trace(
    sc: *const ArraycalScenario,
    rank_tol: f64,
    ranks: *mut usize,
    state_dims: *mut usize,
    len: usize,
) -> ArraycalStatus {
    guard(|| {
        let sc = handle(sc)?;
        let k = sc.file.scenario.n_steps();
        if ranks.is_null() || state_dims.is_null() {
            return Err(fail(ArraycalStatus::NullPointer, "output buffer is null"));
        }
        if len < k {
            return Err(fail(
                ArraycalStatus::BufferTooSmall,
                format!("buffers hold {len} entries, need {k}"),
            ));
        }
        let report = observability::rank_trace(&sc.file.scenario, &policy(rank_tol))?;
        let ranks = std::slice::from_raw_parts_mut(ranks, k);
        let dims = std::slice::from_raw_parts_mut(state_dims, k);
        for (i, row) in report.trace.iter().enumerate() {
            ranks[i] = row.rank;
            dims[i] = row.g2;
        }
        Ok(())
    })
}

/// Rank analysis and sufficient-condition check of the full scenario.
///
/// # Safety
/// `sc` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn arraycal_check(
    sc: *const ArraycalScenario,
    rank_tol: f64,
    out: *mut ArraycalVerdict,
) -> ArraycalStatus {
    guard(|| {
        let sc = handle(sc)?;
        let out = out
            .as_mut()
            .ok_or_else(|| fail(ArraycalStatus::NullPointer, "out is null"))?;
        let r = observability::check(&sc.file.scenario, &policy(rank_tol))?;
        *out = ArraycalVerdict {
            observable: r.observable(),
            rank_j: r.rank_j,
            state_dim: r.g2,
            rank_f: r.rank_f,
            rank_fbar_prime: r.rank_fbar_prime,
            rank_tbar: r.block_ranks.tbar,
            necessary_ok: r.necessary.is_empty(),
            sufficient: r.sufficient.sufficient(),
            n_degenerate: r.degenerate.len(),
        };
        Ok(())
    })
}

/// Analytic Jacobian at the ground truth, `observation_dim × state_dim`,
/// row-major.
///
/// # Safety
/// `sc` must be a live handle and `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn arraycal_jacobian(
    sc: *const ArraycalScenario,
    buf: *mut f64,
    len: usize,
) -> ArraycalStatus {
    guard(|| {
        let sc = handle(sc)?;
        let j = jacobian::assemble(&sc.file.scenario)?.j;
        let out = out_slice(buf, len, j.len())?;
        for (r, row) in j.row_iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                out[r * j.ncols() + c] = *v;
            }
        }
        Ok(())
    })
}

/// Stacked measurements `[y¹; sΔ¹; …; yᴷ]` drawn with `seed`, or the ideal
/// ones when `noise_free` is set.
///
/// # Safety
/// `sc` must be a live handle and `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn arraycal_synthesize(
    sc: *const ArraycalScenario,
    seed: u64,
    noise_free: bool,
    buf: *mut f64,
    len: usize,
) -> ArraycalStatus {
    guard(|| {
        let sc = handle(sc)?;
        let scen = sc.file.scenario.clone().with_seed(seed);
        let meas = if noise_free {
            scenario::ideal_measurements(&scen)?
        } else {
            scenario::synthesize(&scen, &sc.noise)?
        };
        let m = meas.stacked();
        out_slice(buf, len, m.len())?.copy_from_slice(m.as_slice());
        Ok(())
    })
}

/// Ground-truth state vector.
///
/// # Safety
/// `sc` must be a live handle and `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn arraycal_ground_truth(
    sc: *const ArraycalScenario,
    buf: *mut f64,
    len: usize,
) -> ArraycalStatus {
    guard(|| {
        let sc = handle(sc)?;
        let x = StateVector::from_scenario(&sc.file.scenario);
        out_slice(buf, len, x.values().len())?.copy_from_slice(x.values().as_slice());
        Ok(())
    })
}

/// Calibrate from stacked measurements, starting at `init` (ground truth
/// when null). `estimate` receives the best iterate even when the status is
/// `NOT_CONVERGED` or `SINGULAR`; `info` may be null.
///
/// # Safety
/// `sc` must be a live handle; `measurements` must hold `n_measurements`
/// doubles, `init` (if not null) and `estimate` `state_dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn arraycal_calibrate(
    sc: *const ArraycalScenario,
    measurements: *const f64,
    n_measurements: usize,
    init: *const f64,
    estimate: *mut f64,
    state_dim: usize,
    info: *mut ArraycalSolveInfo,
) -> ArraycalStatus {
    guard(|| {
        let sc = handle(sc)?;
        let l = layout(sc);
        let m = in_slice(
            measurements,
            n_measurements,
            l.observation_dim(),
            "measurements",
        )?;
        let meas = unstack(l, m)?;
        let start = if init.is_null() {
            StateVector::from_scenario(&sc.file.scenario)
        } else {
            let v = in_slice(init, state_dim, l.state_dim(), "init")?;
            StateVector::new(l, DVector::from_column_slice(v))?
        };
        let out = out_slice(estimate, state_dim, l.state_dim())?;
        let prob =
            CalibrationProblem::for_scenario(&sc.file.scenario, meas, sc.noise.clone(), start)?;
        let (res, failure) = match calibrate::solve(&prob, &SolverOptions::default()) {
            Ok(r) => (r, None),
            Err(CalibrationError::Model(e)) => return Err(e.into()),
            Err(e) => {
                let status = match e {
                    CalibrationError::NonConvergence(_) => ArraycalStatus::NotConverged,
                    _ => ArraycalStatus::Singular,
                };
                let msg = e.to_string();
                let r = e.result().cloned().expect("solver errors carry a result");
                (r, Some(Failure(status, msg)))
            }
        };
        out.copy_from_slice(res.estimate.values().as_slice());
        if let Some(info) = info.as_mut() {
            *info = ArraycalSolveInfo {
                iterations: res.iterations,
                final_cost: res.final_cost,
                gradient_norm: res.gradient_norm,
                converged: res.converged,
                rank_j: res.rank_report.final_row().rank,
            };
        }
        failure.map_or(Ok(()), Err)
    })
}
