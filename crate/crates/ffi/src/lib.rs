//! C ABI over `sysid`.
//!
//! Objects are opaque handles created by `*_new`/`*_load` functions and
//! released with the matching `*_free`. Every fallible call returns a
//! [`SysidStatus`]; the message of the last failure on the calling thread
//! is available from [`sysid_last_error`]. Matrices are row-major `double`
//! arrays with one row per sample.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{DMatrix, DVector};
use sysid::benchgen::{self, BenchOptions};
use sysid::document::{model_from_json, model_to_json, Model};
use sysid::ekf::{Ekf, LinearModel};
use sysid::signal_data::{fit_percent, SignalTable};
use sysid::{Error, ErrorKind};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SysidStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Data = 3,
    Numerical = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Input/output record.
pub struct SysidData(SignalTable);

/// Trained model of any kind.
pub struct SysidModel(Model);

/// Extended Kalman filter over a linear model.
pub struct SysidEkf(Ekf<LinearModel>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> SysidStatus {
    match e.kind() {
        ErrorKind::Config => SysidStatus::Config,
        ErrorKind::Data => SysidStatus::Data,
        ErrorKind::Numerical => SysidStatus::Numerical,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
    Buffer { needed: usize },
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SysidStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SysidStatus::Ok,
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            SysidStatus::NullPointer
        }
        Ok(Err(Fail::Buffer { needed })) => {
            set_error(format!("buffer too small; {needed} elements needed"));
            SysidStatus::BufferTooSmall
        }
        Err(_) => {
            set_error("internal panic");
            SysidStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, needed: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if len < needed {
        return Err(Fail::Buffer { needed });
    }
    if needed == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn cstr<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::InvalidArgument(format!("{what} is not UTF-8"))))
}

unsafe fn put<T>(out: *mut *mut T, value: T, what: &'static str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null(what));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn get<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn get_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sysid_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn sysid_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sysid_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a record from `n x nu` inputs and `n x ny` outputs.
///
/// # Safety
/// `u` and `y` must point to `n*nu` and `n*ny` doubles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn sysid_data_new(
    n: usize,
    nu: usize,
    u: *const f64,
    ny: usize,
    y: *const f64,
    sample_time: f64,
    out: *mut *mut SysidData,
) -> SysidStatus {
    guard(|| {
        let u = slice(u, n * nu, "u")?;
        let y = slice(y, n * ny, "y")?;
        let t = SignalTable::from_matrices(
            DMatrix::from_row_slice(n, nu, u),
            DMatrix::from_row_slice(n, ny, y),
            sample_time,
            0.0,
        )?;
        put(out, SysidData(t), "out")
    })
}

/// # Safety
/// `data` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sysid_data_free(data: *mut SysidData) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Writes the sample count and channel counts.
///
/// # Safety
/// Pointers must be valid; any output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn sysid_data_shape(
    data: *const SysidData,
    n: *mut usize,
    nu: *mut usize,
    ny: *mut usize,
) -> SysidStatus {
    guard(|| {
        let d = &get(data, "data")?.0;
        for (p, v) in [(n, d.len()), (nu, d.num_inputs()), (ny, d.num_outputs())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies the `n x ny` outputs into `out`.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sysid_data_outputs(data: *const SysidData, out: *mut f64, len: usize) -> SysidStatus {
    guard(|| {
        let y = get(data, "data")?.0.outputs();
        let dst = out_slice(out, len, y.len(), "out")?;
        for r in 0..y.nrows() {
            for c in 0..y.ncols() {
                dst[r * y.ncols() + c] = y[(r, c)];
            }
        }
        Ok(())
    })
}

/// Generates a benchmark data set and splits it 70/30.
///
/// # Safety
/// `system` must be a NUL-terminated string; `estimation` and `validation`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn sysid_benchgen(
    system: *const c_char,
    n: usize,
    seed: u64,
    estimation: *mut *mut SysidData,
    validation: *mut *mut SysidData,
) -> SysidStatus {
    guard(|| {
        let name = cstr(system, "system")?;
        if estimation.is_null() || validation.is_null() {
            return Err(Fail::Null("output handle"));
        }
        let b = benchgen::generate(name, n, seed, &BenchOptions::default())?;
        put(estimation, SysidData(b.estimation), "estimation")?;
        put(validation, SysidData(b.validation), "validation")
    })
}

/// Parses a model document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sysid_model_from_json(json: *const c_char, out: *mut *mut SysidModel) -> SysidStatus {
    guard(|| {
        let m = model_from_json(cstr(json, "json")?)?;
        put(out, SysidModel(m), "out")
    })
}

/// Reads a model document from a file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sysid_model_load(path: *const c_char, out: *mut *mut SysidModel) -> SysidStatus {
    guard(|| {
        let m = sysid::document::load_model(cstr(path, "path")?)?;
        put(out, SysidModel(m), "out")
    })
}

/// Serializes a model; release the string with [`sysid_string_free`].
///
/// # Safety
/// `model` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sysid_model_to_json(model: *const SysidModel, out: *mut *mut c_char) -> SysidStatus {
    guard(|| {
        let text = model_to_json(&get(model, "model")?.0)?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = CString::new(text).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sysid_model_free(model: *mut SysidModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Model kind as a static string: `neural_state_space`, `nlarx` or
/// `hammerstein_wiener`. Null for a null handle.
///
/// # Safety
/// `model` must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn sysid_model_kind(model: *const SysidModel) -> *const c_char {
    match model.as_ref().map(|m| &m.0) {
        Some(Model::NeuralStateSpace(_)) => c"neural_state_space".as_ptr(),
        Some(Model::Nlarx(_)) => c"nlarx".as_ptr(),
        Some(Model::HammersteinWiener(_)) => c"hammerstein_wiener".as_ptr(),
        None => ptr::null(),
    }
}

fn simulate(model: &Model, data: &SignalTable) -> sysid::Result<(DMatrix<f64>, DMatrix<f64>)> {
    Ok(match model {
        Model::NeuralStateSpace(m) => {
            let x0: Vec<f64> = data.outputs().row(0).iter().take(m.nx()).copied().collect();
            let step = m.is_continuous().then(|| data.sample_time());
            (m.simulate(data, &x0, step)?.outputs, data.outputs().clone())
        }
        Model::Nlarx(m) => {
            let y = m.simulate(data)?;
            let first = data.len() - y.len();
            let meas = data
                .channel(m.output_name())
                .ok_or_else(|| Error::MissingColumn(m.output_name().to_string()))?;
            (
                DMatrix::from_column_slice(y.len(), 1, &y),
                DMatrix::from_column_slice(y.len(), 1, &meas[first..]),
            )
        }
        Model::HammersteinWiener(m) => (m.simulate(data)?, data.outputs().clone()),
    })
}

/// Free-run simulation on the inputs of `data`, with initial conditions
/// taken from its measured outputs. Writes `rows x channels` values
/// row-major; nonlinear ARX models skip their first `max_lag` samples.
///
/// # Safety
/// `out` must hold `len` doubles; `rows` and `cols` may be null.
#[no_mangle]
pub unsafe extern "C" fn sysid_model_simulate(
    model: *const SysidModel,
    data: *const SysidData,
    out: *mut f64,
    len: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> SysidStatus {
    guard(|| {
        let (sim, _) = simulate(&get(model, "model")?.0, &get(data, "data")?.0)?;
        if !rows.is_null() {
            *rows = sim.nrows();
        }
        if !cols.is_null() {
            *cols = sim.ncols();
        }
        let dst = out_slice(out, len, sim.len(), "out")?;
        for r in 0..sim.nrows() {
            for c in 0..sim.ncols() {
                dst[r * sim.ncols() + c] = sim[(r, c)];
            }
        }
        Ok(())
    })
}

/// Simulation fit percent per output channel.
///
/// # Safety
/// `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sysid_model_fit(
    model: *const SysidModel,
    data: *const SysidData,
    out: *mut f64,
    len: usize,
) -> SysidStatus {
    guard(|| {
        let (sim, meas) = simulate(&get(model, "model")?.0, &get(data, "data")?.0)?;
        let fit = fit_percent(&meas, &sim)?;
        out_slice(out, len, fit.len(), "out")?[..fit.len()].copy_from_slice(&fit);
        Ok(())
    })
}

/// Filter for `x(k+1) = A x + B u`, `y = C x + D u` with `nx` states, `nu`
/// inputs and `ny` outputs. `p0`, `q` (`nx x nx`) and `r` (`ny x ny`) are
/// full covariance matrices.
///
/// # Safety
/// Every array must hold the number of doubles its shape implies; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn sysid_ekf_new_linear(
    nx: usize,
    nu: usize,
    ny: usize,
    a: *const f64,
    b: *const f64,
    c: *const f64,
    d: *const f64,
    x0: *const f64,
    p0: *const f64,
    q: *const f64,
    r: *const f64,
    out: *mut *mut SysidEkf,
) -> SysidStatus {
    guard(|| {
        let m = |p, r, c, what| -> Result<DMatrix<f64>, Fail> { Ok(DMatrix::from_row_slice(r, c, slice(p, r * c, what)?)) };
        let model = LinearModel::new(m(a, nx, nx, "a")?, m(b, nx, nu, "b")?, m(c, ny, nx, "c")?, m(d, ny, nu, "d")?)?;
        let f = Ekf::new(
            model,
            DVector::from_column_slice(slice(x0, nx, "x0")?),
            m(p0, nx, nx, "p0")?,
            m(q, nx, nx, "q")?,
            m(r, ny, ny, "r")?,
        )?;
        put(out, SysidEkf(f), "out")
    })
}

/// # Safety
/// `ekf` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sysid_ekf_free(ekf: *mut SysidEkf) {
    if !ekf.is_null() {
        drop(Box::from_raw(ekf));
    }
}

/// Time update with input `u` (`nu` values).
///
/// # Safety
/// `u` must hold `nu` doubles.
#[no_mangle]
pub unsafe extern "C" fn sysid_ekf_predict(ekf: *mut SysidEkf, u: *const f64, nu: usize) -> SysidStatus {
    guard(|| {
        let f = &mut get_mut(ekf, "ekf")?.0;
        f.predict(slice(u, nu, "u")?)?;
        Ok(())
    })
}

/// Measurement update. The innovation (`ny` values) is written to
/// `innovation` when it is not null.
///
/// # Safety
/// `y` must hold `ny` doubles, `u` `nu` doubles, `innovation` `ny` doubles
/// or be null.
#[no_mangle]
pub unsafe extern "C" fn sysid_ekf_correct(
    ekf: *mut SysidEkf,
    y: *const f64,
    ny: usize,
    u: *const f64,
    nu: usize,
    innovation: *mut f64,
) -> SysidStatus {
    guard(|| {
        let f = &mut get_mut(ekf, "ekf")?.0;
        let inn = f.correct(slice(y, ny, "y")?, slice(u, nu, "u")?)?;
        if !innovation.is_null() {
            std::slice::from_raw_parts_mut(innovation, inn.residual.len()).copy_from_slice(inn.residual.as_slice());
        }
        Ok(())
    })
}

/// Copies the state estimate (`nx` values) and, when `p` is not null, the
/// covariance (`nx * nx` values, row-major).
///
/// # Safety
/// `x` must hold `nx` doubles; `p` must hold `nx * nx` doubles or be null.
#[no_mangle]
pub unsafe extern "C" fn sysid_ekf_state(ekf: *const SysidEkf, x: *mut f64, nx: usize, p: *mut f64) -> SysidStatus {
    guard(|| {
        let f = &get(ekf, "ekf")?.0;
        let n = f.state().len();
        out_slice(x, nx, n, "x")?[..n].copy_from_slice(f.state().as_slice());
        if !p.is_null() {
            let dst = std::slice::from_raw_parts_mut(p, n * n);
            let cov = f.covariance();
            for i in 0..n {
                for j in 0..n {
                    dst[i * n + j] = cov[(i, j)];
                }
            }
        }
        Ok(())
    })
}

/// Runs the `sysid` command line with `argc` arguments (the program name
/// first) and returns its exit code.
///
/// # Safety
/// `argv` must hold `argc` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn sysid_cli_run(argc: c_int, argv: *const *const c_char) -> c_int {
    if argv.is_null() || argc < 1 {
        set_error("argv is empty");
        return 2;
    }
    let args: Vec<String> = (0..argc as usize)
        .map(|i| {
            let p = *argv.add(i);
            if p.is_null() {
                String::new()
            } else {
                CStr::from_ptr(p).to_string_lossy().into_owned()
            }
        })
        .collect();
    match catch_unwind(|| sysid::cli::run(args)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic");
            SysidStatus::Panic as c_int
        }
    }
}
