//! Discrete-time extended Kalman filter with additive noise. Jacobians of
//! the transition and measurement maps come from the tape.

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::neural_ss::NeuralStateSpaceModel;
use crate::optim::condition_estimate;

/// Innovation covariances with a condition number above this are treated as
/// singular.
pub const MAX_INNOVATION_CONDITION: f64 = 1e14;

/// `x(k+1) = f(x(k), u(k))`, `y(k) = h(x(k), u(k))`, with `x` a `1 x nx` row.
pub trait StateModel {
    fn nx(&self) -> usize;
    fn nu(&self) -> usize;
    fn ny(&self) -> usize;
    fn transition<'t>(&self, tape: &'t Tape, x: Var<'t>, u: &[f64]) -> Result<Var<'t>>;
    fn measurement<'t>(&self, tape: &'t Tape, x: Var<'t>, u: &[f64]) -> Result<Var<'t>>;
}

/// State model from a pair of closures.
pub struct FnModel<F, H> {
    nx: usize,
    nu: usize,
    ny: usize,
    f: F,
    h: H,
}

impl<F, H> FnModel<F, H>
where
    F: for<'t> Fn(&'t Tape, Var<'t>, &[f64]) -> Result<Var<'t>>,
    H: for<'t> Fn(&'t Tape, Var<'t>, &[f64]) -> Result<Var<'t>>,
{
    pub fn new(nx: usize, nu: usize, ny: usize, f: F, h: H) -> Self {
        Self { nx, nu, ny, f, h }
    }
}

impl<F, H> StateModel for FnModel<F, H>
where
    F: for<'t> Fn(&'t Tape, Var<'t>, &[f64]) -> Result<Var<'t>>,
    H: for<'t> Fn(&'t Tape, Var<'t>, &[f64]) -> Result<Var<'t>>,
{
    fn nx(&self) -> usize {
        self.nx
    }
    fn nu(&self) -> usize {
        self.nu
    }
    fn ny(&self) -> usize {
        self.ny
    }
    fn transition<'t>(&self, tape: &'t Tape, x: Var<'t>, u: &[f64]) -> Result<Var<'t>> {
        (self.f)(tape, x, u)
    }
    fn measurement<'t>(&self, tape: &'t Tape, x: Var<'t>, u: &[f64]) -> Result<Var<'t>> {
        (self.h)(tape, x, u)
    }
}

/// `x(k+1) = A x + B u`, `y = C x + D u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || c.ncols() != n || d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(Error::DimensionMismatch("inconsistent A, B, C, D".into()));
        }
        Ok(Self { a, b, c, d })
    }

    fn affine<'t>(tape: &'t Tape, x: Var<'t>, m: &DMatrix<f64>, n: &DMatrix<f64>, u: &[f64]) -> Result<Var<'t>> {
        let xm = x.matmul_t(tape.matrix(m))?;
        if u.is_empty() {
            return Ok(xm);
        }
        let un: Vec<f64> = (n * DVector::from_column_slice(u)).iter().copied().collect();
        xm.add(tape.row(&un))
    }
}

impl StateModel for LinearModel {
    fn nx(&self) -> usize {
        self.a.nrows()
    }
    fn nu(&self) -> usize {
        self.b.ncols()
    }
    fn ny(&self) -> usize {
        self.c.nrows()
    }
    fn transition<'t>(&self, tape: &'t Tape, x: Var<'t>, u: &[f64]) -> Result<Var<'t>> {
        Self::affine(tape, x, &self.a, &self.b, u)
    }
    fn measurement<'t>(&self, tape: &'t Tape, x: Var<'t>, u: &[f64]) -> Result<Var<'t>> {
        Self::affine(tape, x, &self.c, &self.d, u)
    }
}

impl StateModel for NeuralStateSpaceModel {
    fn nx(&self) -> usize {
        NeuralStateSpaceModel::nx(self)
    }
    fn nu(&self) -> usize {
        NeuralStateSpaceModel::nu(self)
    }
    fn ny(&self) -> usize {
        NeuralStateSpaceModel::ny(self)
    }
    fn transition<'t>(&self, tape: &'t Tape, x: Var<'t>, u: &[f64]) -> Result<Var<'t>> {
        let vars = self.record(tape);
        self.record_transition(tape, &vars, x, u)
    }
    fn measurement<'t>(&self, tape: &'t Tape, x: Var<'t>, u: &[f64]) -> Result<Var<'t>> {
        let vars = self.record(tape);
        self.record_measurement(tape, &vars, x, u)
    }
}

/// Result of one measurement update.
#[derive(Debug, Clone, PartialEq)]
pub struct Innovation {
    /// `y - h(x_prior, u)`
    pub residual: DVector<f64>,
    /// `S = H P H^T + R`
    pub covariance: DMatrix<f64>,
    /// normalized innovation squared `r^T S^-1 r`
    pub nis: f64,
}

pub struct Ekf<M> {
    model: M,
    x: DVector<f64>,
    p: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

fn check_square(name: &str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!("{name} is {:?}, expected {n}x{n}", m.shape())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(name.into()));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::InvalidArgument(format!("{name} is not symmetric")));
    }
    Ok(())
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

impl<M: StateModel> Ekf<M> {
    pub fn new(model: M, x0: DVector<f64>, p0: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let (nx, ny) = (model.nx(), model.ny());
        if x0.len() != nx {
            return Err(Error::DimensionMismatch(format!("x0 has {} entries, model has {nx} states", x0.len())));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("x0".into()));
        }
        check_square("P0", &p0, nx)?;
        check_square("Q", &q, nx)?;
        check_square("R", &r, ny)?;
        Ok(Self { model, x: x0, p: p0, q, r })
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.p
    }

    fn check_u(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.model.nu() {
            return Err(Error::DimensionMismatch(format!("expected {} inputs, got {}", self.model.nu(), u.len())));
        }
        Ok(())
    }

    /// Value and Jacobian of `f` or `h` at the current estimate.
    fn linearize(&self, u: &[f64], measurement: bool) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let tape = Tape::new();
        let x = tape.row(self.x.as_slice());
        let out = if measurement {
            self.model.measurement(&tape, x, u)?
        } else {
            self.model.transition(&tape, x, u)?
        };
        let expected = if measurement { self.model.ny() } else { self.model.nx() };
        if out.rows() * out.cols() != expected {
            return Err(Error::DimensionMismatch(format!(
                "map returned {} values, expected {expected}",
                out.rows() * out.cols()
            )));
        }
        let v = out.value();
        if v.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFiniteValue(if measurement { "h(x, u)" } else { "f(x, u)" }.into()));
        }
        let j = tape.jacobian(out, &[x])?;
        Ok((DVector::from_vec(v), j))
    }

    /// `x <- f(x, u)`, `P <- F P F^T + Q`.
    pub fn predict(&mut self, u: &[f64]) -> Result<()> {
        self.check_u(u)?;
        let (fx, f) = self.linearize(u, false)?;
        let mut p = &f * &self.p * f.transpose() + &self.q;
        symmetrize(&mut p);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("predicted covariance".into()));
        }
        self.x = fx;
        self.p = p;
        Ok(())
    }

    /// Measurement update with the Joseph-form covariance.
    pub fn correct(&mut self, y: &[f64], u: &[f64]) -> Result<Innovation> {
        self.check_u(u)?;
        if y.len() != self.model.ny() {
            return Err(Error::DimensionMismatch(format!("expected {} outputs, got {}", self.model.ny(), y.len())));
        }
        let (hx, h) = self.linearize(u, true)?;
        let residual = DVector::from_column_slice(y) - hx;
        let ph_t = &self.p * h.transpose();
        let mut s = &h * &ph_t + &self.r;
        symmetrize(&mut s);
        let condition = condition_estimate(&s);
        let lu = s.clone().lu();
        let kt = match lu.solve(&ph_t.transpose()) {
            Some(kt) if condition <= MAX_INNOVATION_CONDITION => kt,
            _ => {
                return Err(Error::Singular {
                    context: "innovation covariance".into(),
                    condition,
                })
            }
        };
        let k = kt.transpose();
        let nis = residual.dot(&lu.solve(&residual).expect("checked above"));
        let x = &self.x + &k * &residual;
        let n = self.model.nx();
        let ikh = DMatrix::identity(n, n) - &k * &h;
        let mut p = &ikh * &self.p * ikh.transpose() + &k * &self.r * k.transpose();
        symmetrize(&mut p);
        if x.iter().chain(p.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("corrected estimate".into()));
        }
        self.x = x;
        self.p = p;
        Ok(Innovation {
            residual,
            covariance: s,
            nis,
        })
    }
}
