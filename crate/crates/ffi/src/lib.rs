//! C ABI over the `capres` toolkit.
//!
//! Every function returns a [`CapresStatus`]; results go through out-pointers.
//! Objects are opaque handles released with the matching `*_free`. The text of
//! the last error on the calling thread is available from
//! [`capres_last_error_message`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use capres::capsolve::{oracle_concentric_balls, solve_capacity, SolverOptions};
use capres::extension::lambda_o;
use capres::geometry::{build_cantor_domain, svc_build, CantorCylinderSpec, CantorDomain, Condenser, HFunction};
use capres::grid::Lattice;
use capres::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CapresStatus {
    Ok = 0,
    InvalidInput = 1,
    UnderResolved = 2,
    ResolutionMismatch = 3,
    NotAdmissible = 4,
    NonConvergence = 5,
    Io = 6,
    NullPointer = 7,
    Panic = 8,
}

/// Opaque condenser handle.
pub struct CapresCondenser(Condenser);

/// Opaque Cantor-cylinder domain handle.
pub struct CapresCantorDomain(CantorDomain);

/// Outcome of a grid solve.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct CapresCapacity {
    pub value: f64,
    pub residual: f64,
    pub iterations: usize,
    /// Exponent the solver actually used.
    pub p_used: f64,
    pub converged: bool,
    pub approximate: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CapresStatus {
    match e {
        Error::InvalidInput(_) => CapresStatus::InvalidInput,
        Error::UnderResolved(_) => CapresStatus::UnderResolved,
        Error::ResolutionMismatch(_) => CapresStatus::ResolutionMismatch,
        Error::NotAdmissible(_) => CapresStatus::NotAdmissible,
        Error::NonConvergence { .. } => CapresStatus::NonConvergence,
        Error::Io(_) | Error::Json(_) => CapresStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (CapresStatus, String)>) -> CapresStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CapresStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            CapresStatus::Panic
        }
    }
}

fn lift<T>(r: capres::Result<T>) -> Result<T, (CapresStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (CapresStatus, String) {
    (CapresStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn capres_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn capres_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Closed-form capacity of `(B(r), complement of B(R))` in dimension `n`.
///
/// # Safety
/// `out` must be a valid pointer to a `double`.
#[no_mangle]
pub unsafe extern "C" fn capres_oracle_concentric_balls(n: usize, p: f64, r: f64, big_r: f64, out: *mut f64) -> CapresStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let v = lift(oracle_concentric_balls(n, p, r, big_r))?;
        *out = v;
        Ok(())
    })
}

/// Lower bound of the admissible `lambda` range.
///
/// # Safety
/// `out` must be a valid pointer to a `double`.
#[no_mangle]
pub unsafe extern "C" fn capres_lambda_o(n: usize, p: f64, q: f64, out: *mut f64) -> CapresStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = lift(lambda_o(n, p, q))?;
        Ok(())
    })
}

/// Length of the level-`level` Smith-Volterra-Cantor approximation.
///
/// # Safety
/// `out` must be a valid pointer to a `double`.
#[no_mangle]
pub unsafe extern "C" fn capres_svc_measure(level: usize, out: *mut f64) -> CapresStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if level > 30 {
            return Err((CapresStatus::InvalidInput, format!("SVC level {level} exceeds 30")));
        }
        *out = svc_build(level).measure();
        Ok(())
    })
}

/// `(B(x, r), A(x; R, 2R); B(x, 2R))` centred at the origin of `R^n`.
///
/// # Safety
/// `out` must be a valid pointer to a handle pointer.
#[no_mangle]
pub unsafe extern "C" fn capres_condenser_concentric_balls(
    n: usize,
    r: f64,
    big_r: f64,
    p: f64,
    out: *mut *mut CapresCondenser,
) -> CapresStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if n < 1 || !(r > 0.0 && big_r > 0.0 && p >= 1.0) {
            return Err((CapresStatus::InvalidInput, "need n >= 1, r, R > 0 and p >= 1".into()));
        }
        let c = Condenser::concentric_balls(&vec![0.0; n], r, big_r, p);
        *out = Box::into_raw(Box::new(CapresCondenser(c)));
        Ok(())
    })
}

/// Condenser from its JSON description.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn capres_condenser_from_json(json: *const c_char, out: *mut *mut CapresCondenser) -> CapresStatus {
    guard(|| {
        if json.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let text = CStr::from_ptr(json).to_str().map_err(|e| (CapresStatus::InvalidInput, e.to_string()))?;
        let c: Condenser = serde_json::from_str(text).map_err(|e| (CapresStatus::InvalidInput, e.to_string()))?;
        *out = Box::into_raw(Box::new(CapresCondenser(c)));
        Ok(())
    })
}

/// Releases a condenser. Null is ignored.
///
/// # Safety
/// `c` must come from a `capres_condenser_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn capres_condenser_free(c: *mut CapresCondenser) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Grid solve with default options on a lattice with `grid` nodes along the
/// longest side of the ambient bounding box.
///
/// # Safety
/// `c` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn capres_solve_capacity(c: *const CapresCondenser, grid: usize, out: *mut CapresCapacity) -> CapresStatus {
    guard(|| {
        if c.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let cond = &(*c).0;
        let lattice = lift(Lattice::covering(&cond.ambient.bounding_box(), grid))?;
        let est = lift(solve_capacity(cond, &lattice, &SolverOptions::default()))?;
        *out = CapresCapacity {
            value: est.value,
            residual: est.residual,
            iterations: est.iterations,
            p_used: est.p_used,
            converged: est.converged,
            approximate: est.approximate,
        };
        if !est.converged {
            return Err((CapresStatus::NonConvergence, "solver did not converge; *out holds the last iterate".into()));
        }
        Ok(())
    })
}

/// Builds the Cantor-cylinder domain in `R^3` with `h(t) = t` and the first
/// `m` nonempty generations. `tilde` selects thin cylinders.
///
/// # Safety
/// `out` must be a valid pointer to a handle pointer.
#[no_mangle]
pub unsafe extern "C" fn capres_cantor_build(
    q: f64,
    lambda: f64,
    m: usize,
    svc_level: usize,
    tilde: bool,
    out: *mut *mut CapresCantorDomain,
) -> CapresStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = CantorCylinderSpec { n: 3, q, lambda, h: HFunction::Identity, m, svc_level, radii_rule: Default::default() };
        let d = lift(build_cantor_domain(&spec, tilde))?;
        *out = Box::into_raw(Box::new(CapresCantorDomain(d)));
        Ok(())
    })
}

/// Number of cylinders in the domain.
///
/// # Safety
/// `d` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn capres_cantor_cylinder_count(d: *const CapresCantorDomain, out: *mut usize) -> CapresStatus {
    guard(|| {
        if d.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        *out = (*d).0.cylinders().len();
        Ok(())
    })
}

/// Membership of the point `z[0..len]`.
///
/// # Safety
/// `d` must be a live handle, `z` must point to `len` doubles, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn capres_cantor_contains(
    d: *const CapresCantorDomain,
    z: *const f64,
    len: usize,
    out: *mut bool,
) -> CapresStatus {
    guard(|| {
        if d.is_null() || z.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        if len != 3 {
            return Err((CapresStatus::InvalidInput, format!("expected a point of length 3, got {len}")));
        }
        *out = (*d).0.contains(std::slice::from_raw_parts(z, len));
        Ok(())
    })
}

/// Releases a domain. Null is ignored.
///
/// # Safety
/// `d` must come from [`capres_cantor_build`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn capres_cantor_free(d: *mut CapresCantorDomain) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}
