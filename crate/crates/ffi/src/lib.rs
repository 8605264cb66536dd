//! C ABI over the `aspca` library.
//!
//! Conventions:
//! - every fallible function returns an [`AspcaStatus`]; on failure a
//!   thread-local message is available through [`aspca_last_error`];
//! - handles are opaque and owned by the caller, who releases them with the
//!   matching `_free` function (passing null is allowed);
//! - arrays are passed as pointer plus length and lengths are checked;
//! - matrices are row-major `rows * cols` buffers.
//!
//! Panics never cross the boundary; they surface as [`AspcaStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use aspca::adjoint::{ObjectiveConfig, Observations};
use aspca::basis::{eigendecompose, truncate, LatentVector, ReducedBasis, Truncation};
use aspca::field::{Field, Grid, PriorDataset};
use aspca::forward::{simulate, SimConfig};
use aspca::optimize::{DiffusionProblem, DEFAULT_D_FLOOR};
use aspca::strategies::{
    extension_update, rotation_update, sensitivity_coefficients, swap_update, AlphaMode,
    RotationConfig,
};
use aspca::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AspcaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    SolverFailure = 3,
    InvalidState = 4,
    ParseError = 5,
    IoError = 6,
    Panic = 7,
}

impl From<&Error> for AspcaStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) => AspcaStatus::InvalidArgument,
            Error::SolverFailure { .. } => AspcaStatus::SolverFailure,
            Error::InvalidState(_) => AspcaStatus::InvalidState,
            Error::Parse { .. } => AspcaStatus::ParseError,
            Error::Io(_) => AspcaStatus::IoError,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
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

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Lib(Error::InvalidArgument(msg.into()))
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AspcaStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AspcaStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            AspcaStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            AspcaStatus::from(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            AspcaStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_usize<'a>(
    p: *const usize,
    len: usize,
    what: &'static str,
) -> Result<&'a [usize], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(
    p: *mut f64,
    len: usize,
    what: &'static str,
) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

fn copy_out(dst: &mut [f64], src: &[f64], what: &str) -> Result<(), Failure> {
    if dst.len() != src.len() {
        return Err(invalid(format!(
            "{what}: buffer holds {}, need {}",
            dst.len(),
            src.len()
        )));
    }
    dst.copy_from_slice(src);
    Ok(())
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length
/// including the terminator, or 0 when there is no error.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn aspca_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match e.borrow().as_ref() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes_with_nul();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
                *buf.add(n - 1) = 0;
            }
            bytes.len()
        }
    })
}

/// Time-stepping parameters, mirroring the library configuration.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AspcaSimConfig {
    pub t_end: f64,
    pub n_steps: usize,
    pub u0: f64,
    pub flux_left: f64,
    pub flux_right: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl From<AspcaSimConfig> for SimConfig {
    fn from(c: AspcaSimConfig) -> Self {
        SimConfig {
            t_end: c.t_end,
            n_steps: c.n_steps,
            u0: c.u0,
            flux_left: c.flux_left,
            flux_right: c.flux_right,
            newton_tol: c.newton_tol,
            newton_max_iter: c.newton_max_iter,
        }
    }
}

#[no_mangle]
pub extern "C" fn aspca_sim_config_default() -> AspcaSimConfig {
    let d = SimConfig::default();
    AspcaSimConfig {
        t_end: d.t_end,
        n_steps: d.n_steps,
        u0: d.u0,
        flux_left: d.flux_left,
        flux_right: d.flux_right,
        newton_tol: d.newton_tol,
        newton_max_iter: d.newton_max_iter,
    }
}

/// Runs the forward model and writes `(n_steps + 1) * n_cells` states,
/// row-major by step, into `states`.
///
/// # Safety
/// Pointers must be valid for their stated lengths; `cfg` must be non-null.
#[no_mangle]
pub unsafe extern "C" fn aspca_simulate(
    d: *const f64,
    n_cells: usize,
    length: f64,
    cfg: *const AspcaSimConfig,
    states: *mut f64,
    states_len: usize,
) -> AspcaStatus {
    guard(|| {
        let d = slice(d, n_cells, "d")?;
        let cfg: SimConfig = (*handle(cfg, "cfg")?).into();
        let grid = Grid::new(n_cells, length)?;
        let traj = simulate(&Field(d.to_vec()), &grid, &cfg)?;
        let flat: Vec<f64> = traj.states.concat();
        copy_out(slice_mut(states, states_len, "states")?, &flat, "states")
    })
}

/// Reduced PCA basis.
pub struct AspcaBasis(ReducedBasis);

/// Builds a basis from `n_real` realizations of `n_cells` values each
/// (row-major). Truncation keeps the smallest count reaching
/// `energy_threshold`, capped at `max_components` when it is nonzero.
///
/// # Safety
/// `data` must hold `n_real * n_cells` values; `out` must be non-null.
#[no_mangle]
pub unsafe extern "C" fn aspca_basis_from_realizations(
    data: *const f64,
    n_real: usize,
    n_cells: usize,
    energy_threshold: f64,
    max_components: usize,
    out: *mut *mut AspcaBasis,
) -> AspcaStatus {
    guard(|| {
        let total = n_real
            .checked_mul(n_cells)
            .ok_or_else(|| invalid("size overflow"))?;
        let data = slice(data, total, "data")?;
        if n_cells == 0 {
            return Err(invalid("n_cells must be positive"));
        }
        let realizations = data.chunks(n_cells).map(|c| Field(c.to_vec())).collect();
        let dataset = PriorDataset::from_realizations(realizations)?;
        let full = eigendecompose(&dataset.covariance, &dataset.mean)?;
        let rule = Truncation::Energy {
            threshold: energy_threshold,
            max_components: (max_components > 0).then_some(max_components),
        };
        emit(out, AspcaBasis(truncate(&full, rule)?))
    })
}

/// # Safety
/// `basis` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aspca_basis_free(basis: *mut AspcaBasis) {
    if !basis.is_null() {
        drop(Box::from_raw(basis));
    }
}

/// # Safety
/// `basis` must be a live handle; output pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn aspca_basis_dims(
    basis: *const AspcaBasis,
    n_cells: *mut usize,
    n_retained: *mut usize,
    n_complement: *mut usize,
) -> AspcaStatus {
    guard(|| {
        let b = &handle(basis, "basis")?.0;
        for (p, v) in [
            (n_cells, b.n_cells()),
            (n_retained, b.n_retained()),
            (n_complement, b.n_complement()),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Retained eigenvalues, largest first.
///
/// # Safety
/// `basis` must be a live handle; `out` valid for `len` values.
#[no_mangle]
pub unsafe extern "C" fn aspca_basis_eigenvalues(
    basis: *const AspcaBasis,
    out: *mut f64,
    len: usize,
) -> AspcaStatus {
    guard(|| {
        let b = &handle(basis, "basis")?.0;
        copy_out(
            slice_mut(out, len, "out")?,
            b.retained_eigenvalues.as_slice(),
            "eigenvalues",
        )
    })
}

/// `m = mean + W diag(sqrt(beta)) xi`.
///
/// # Safety
/// Pointers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn aspca_basis_synthesize(
    basis: *const AspcaBasis,
    xi: *const f64,
    n_xi: usize,
    m_out: *mut f64,
    n_m: usize,
) -> AspcaStatus {
    guard(|| {
        let b = &handle(basis, "basis")?.0;
        let m = b.synthesize(&LatentVector::from_slice(slice(xi, n_xi, "xi")?))?;
        copy_out(slice_mut(m_out, n_m, "m_out")?, m.values(), "m_out")
    })
}

/// Latent coordinates of `m`.
///
/// # Safety
/// Pointers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn aspca_basis_project(
    basis: *const AspcaBasis,
    m: *const f64,
    n_m: usize,
    xi_out: *mut f64,
    n_xi: usize,
) -> AspcaStatus {
    guard(|| {
        let b = &handle(basis, "basis")?.0;
        let xi = b.project(&Field(slice(m, n_m, "m")?.to_vec()))?;
        copy_out(
            slice_mut(xi_out, n_xi, "xi_out")?,
            xi.0.as_slice(),
            "xi_out",
        )
    })
}

/// Latent gradient from a model-space gradient.
///
/// # Safety
/// Pointers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn aspca_basis_chain_gradient(
    basis: *const AspcaBasis,
    grad_m: *const f64,
    n_m: usize,
    grad_xi: *mut f64,
    n_xi: usize,
) -> AspcaStatus {
    guard(|| {
        let b = &handle(basis, "basis")?.0;
        let g = b.chain_gradient(slice(grad_m, n_m, "grad_m")?)?;
        copy_out(
            slice_mut(grad_xi, n_xi, "grad_xi")?,
            g.as_slice(),
            "grad_xi",
        )
    })
}

unsafe fn adapt(
    basis: *const AspcaBasis,
    grad_m: *const f64,
    n_m: usize,
    out: *mut *mut AspcaBasis,
    f: impl FnOnce(
        &ReducedBasis,
        &aspca::strategies::SensitivityCoefficients,
    ) -> aspca::Result<ReducedBasis>,
) -> AspcaStatus {
    guard(|| {
        let b = &handle(basis, "basis")?.0;
        let coeffs = sensitivity_coefficients(b, slice(grad_m, n_m, "grad_m")?)?;
        emit(out, AspcaBasis(f(b, &coeffs)?))
    })
}

/// Rotation update in product mode with Gram-Schmidt. A new handle is
/// written to `out`; the input handle is unchanged.
///
/// # Safety
/// Pointers must be valid for their stated lengths; `out` non-null.
#[no_mangle]
pub unsafe extern "C" fn aspca_basis_rotate(
    basis: *const AspcaBasis,
    grad_m: *const f64,
    n_m: usize,
    epsilon: f64,
    out: *mut *mut AspcaBasis,
) -> AspcaStatus {
    adapt(basis, grad_m, n_m, out, |b, c| {
        let cfg = RotationConfig {
            epsilon,
            alpha_mode: AlphaMode::Product,
            ..RotationConfig::default()
        };
        rotation_update(b, c, &cfg).map(|(nb, _)| nb)
    })
}

/// Promotes the `n_add` most sensitive complement vectors.
///
/// # Safety
/// Pointers must be valid for their stated lengths; `out` non-null.
#[no_mangle]
pub unsafe extern "C" fn aspca_basis_extend(
    basis: *const AspcaBasis,
    grad_m: *const f64,
    n_m: usize,
    n_add: usize,
    out: *mut *mut AspcaBasis,
) -> AspcaStatus {
    adapt(basis, grad_m, n_m, out, |b, c| {
        extension_update(b, c, n_add).map(|(nb, _)| nb)
    })
}

/// Exchanges `n_swap` retained/complement pairs.
///
/// # Safety
/// Pointers must be valid for their stated lengths; `out` non-null.
#[no_mangle]
pub unsafe extern "C" fn aspca_basis_swap(
    basis: *const AspcaBasis,
    grad_m: *const f64,
    n_m: usize,
    n_swap: usize,
    out: *mut *mut AspcaBasis,
) -> AspcaStatus {
    adapt(basis, grad_m, n_m, out, |b, c| {
        let d = RotationConfig::default();
        swap_update(b, c, n_swap, d.alpha_mode, d.denom_tol).map(|(nb, _)| nb)
    })
}

/// Misfit-only inverse problem with fixed observations.
pub struct AspcaProblem(DiffusionProblem);

/// Creates a problem from observations `values` (`n_times * n_locations`,
/// row-major by time) at step indices `times` and cells `locations`.
///
/// # Safety
/// Pointers must be valid for their stated lengths; `cfg`, `out` non-null.
#[no_mangle]
pub unsafe extern "C" fn aspca_problem_new(
    n_cells: usize,
    length: f64,
    cfg: *const AspcaSimConfig,
    times: *const usize,
    n_times: usize,
    locations: *const usize,
    n_locations: usize,
    values: *const f64,
    noise_std: f64,
    out: *mut *mut AspcaProblem,
) -> AspcaStatus {
    guard(|| {
        let grid = Grid::new(n_cells, length)?;
        let sim: SimConfig = (*handle(cfg, "cfg")?).into();
        sim.validate()?;
        let total = n_times
            .checked_mul(n_locations)
            .ok_or_else(|| invalid("size overflow"))?;
        let values = slice(values, total, "values")?;
        let observations = Observations {
            times: slice_usize(times, n_times, "times")?.to_vec(),
            locations: slice_usize(locations, n_locations, "locations")?.to_vec(),
            values: values
                .chunks(n_locations.max(1))
                .map(<[f64]>::to_vec)
                .collect(),
            noise_std,
        };
        observations.check_ranges(sim.n_steps + 1, n_cells)?;
        emit(
            out,
            AspcaProblem(DiffusionProblem {
                grid,
                sim,
                observations,
                objective: ObjectiveConfig::misfit_only(n_cells),
                d_floor: DEFAULT_D_FLOOR,
            }),
        )
    })
}

/// # Safety
/// `problem` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn aspca_problem_free(problem: *mut AspcaProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

fn evaluation_failed() -> Failure {
    Failure::Lib(Error::InvalidState(
        "forward solve failed or the model is below the positivity floor".into(),
    ))
}

/// Objective value at coefficient field `d`.
///
/// # Safety
/// Pointers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn aspca_problem_objective(
    problem: *const AspcaProblem,
    d: *const f64,
    n: usize,
    value: *mut f64,
) -> AspcaStatus {
    guard(|| {
        let p = &handle(problem, "problem")?.0;
        let d = slice(d, n, "d")?;
        if n != p.grid.n_cells {
            return Err(invalid(format!(
                "d has {n} cells, problem has {}",
                p.grid.n_cells
            )));
        }
        if value.is_null() {
            return Err(Failure::Null("value"));
        }
        *value = p.value(&Field(d.to_vec())).ok_or_else(evaluation_failed)?;
        Ok(())
    })
}

/// Objective and adjoint gradient at `d`; `grad` must hold `n` values.
///
/// # Safety
/// Pointers must be valid for their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn aspca_problem_gradient(
    problem: *const AspcaProblem,
    d: *const f64,
    n: usize,
    value: *mut f64,
    grad: *mut f64,
) -> AspcaStatus {
    guard(|| {
        let p = &handle(problem, "problem")?.0;
        let d = slice(d, n, "d")?;
        if n != p.grid.n_cells {
            return Err(invalid(format!(
                "d has {n} cells, problem has {}",
                p.grid.n_cells
            )));
        }
        let (v, g) = p
            .value_and_gradient(&Field(d.to_vec()))
            .ok_or_else(evaluation_failed)?;
        copy_out(slice_mut(grad, n, "grad")?, &g, "grad")?;
        if !value.is_null() {
            *value = v;
        }
        Ok(())
    })
}
