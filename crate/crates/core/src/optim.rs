//! First-order training solvers (ADAM, SGDM, RMSProp), L-BFGS with an
//! Armijo backtracking line search, and Levenberg-Marquardt for nonlinear
//! least squares.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    #[default]
    Adam,
    Sgdm,
    Lbfgs,
    Rmsprop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFn {
    #[default]
    MeanSquaredError,
    MeanAbsoluteError,
}

impl LossFn {
    /// Mean loss of the elements of `residual` (recorded on its tape).
    pub fn record<'t>(self, residual: Var<'t>) -> Var<'t> {
        match self {
            LossFn::MeanSquaredError => residual.square().mean(),
            LossFn::MeanAbsoluteError => residual.abs().mean(),
        }
    }

    pub fn eval(self, residual: &[f64]) -> f64 {
        let n = residual.len() as f64;
        match self {
            LossFn::MeanSquaredError => residual.iter().map(|r| r * r).sum::<f64>() / n,
            LossFn::MeanAbsoluteError => residual.iter().map(|r| r.abs()).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingOptions {
    pub solver: Solver,
    pub learn_rate: f64,
    pub max_epochs: usize,
    pub loss: LossFn,
    /// SGDM momentum
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// RMSProp squared-gradient decay
    pub squared_gradient_decay: f64,
    pub lbfgs_memory: usize,
    pub seed: u64,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        Self {
            solver: Solver::Adam,
            learn_rate: 0.001,
            max_epochs: 100,
            loss: LossFn::MeanSquaredError,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            squared_gradient_decay: 0.9,
            lbfgs_memory: 10,
            seed: 0,
        }
    }
}

impl TrainingOptions {
    pub fn with_solver(solver: Solver) -> Self {
        Self {
            solver,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("training option {what}")));
        if !(self.learn_rate > 0.0) {
            return bad("learn_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1/beta2 must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.squared_gradient_decay) {
            return bad("squared_gradient_decay must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.lbfgs_memory == 0 {
            return bad("lbfgs_memory must be at least 1");
        }
        Ok(())
    }
}

/// Moment buffers of a first-order solver.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstOrderState {
    solver: Solver,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl FirstOrderState {
    pub fn new(solver: Solver, n: usize) -> Result<Self> {
        if solver == Solver::Lbfgs {
            return Err(Error::InvalidArgument(
                "LBFGS is not a first-order stepping solver".into(),
            ));
        }
        Ok(Self {
            solver,
            first: vec![0.0; n],
            second: vec![0.0; n],
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// One update of `params` from `grad`.
///
/// * SGDM: `v <- mu v - lr g`, `p <- p + v`
/// * ADAM: bias-corrected moments, `p <- p - lr m_hat / (sqrt(v_hat) + eps)`
/// * RMSProp: `s <- rho s + (1 - rho) g^2`, `p <- p - lr g / (sqrt(s) + eps)`
pub fn step_first_order(
    state: &mut FirstOrderState,
    params: &mut [f64],
    grad: &[f64],
    opts: &TrainingOptions,
) -> Result<()> {
    if grad.len() != params.len() || state.first.len() != params.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} parameters, {} gradient entries, state for {}",
            params.len(),
            grad.len(),
            state.first.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    state.steps += 1;
    let lr = opts.learn_rate;
    match state.solver {
        Solver::Sgdm => {
            for ((p, v), g) in params.iter_mut().zip(&mut state.first).zip(grad) {
                *v = opts.momentum * *v - lr * g;
                *p += *v;
            }
        }
        Solver::Adam => {
            let t = state.steps as i32;
            let c1 = 1.0 - opts.beta1.powi(t);
            let c2 = 1.0 - opts.beta2.powi(t);
            for (((p, m), v), g) in params
                .iter_mut()
                .zip(&mut state.first)
                .zip(&mut state.second)
                .zip(grad)
            {
                *m = opts.beta1 * *m + (1.0 - opts.beta1) * g;
                *v = opts.beta2 * *v + (1.0 - opts.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + opts.epsilon);
            }
        }
        Solver::Rmsprop => {
            let rho = opts.squared_gradient_decay;
            for ((p, s), g) in params.iter_mut().zip(&mut state.second).zip(grad) {
                *s = rho * *s + (1.0 - rho) * g * g;
                *p -= lr * g / (s.sqrt() + opts.epsilon);
            }
        }
        Solver::Lbfgs => unreachable!("rejected in FirstOrderState::new"),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iter: 500,
            grad_tol: 1e-10,
        }
    }
}

pub const ARMIJO_C: f64 = 1e-4;
pub const MAX_HALVINGS: usize = 40;

/// Limited-memory BFGS driven one iteration at a time.
#[derive(Debug, Clone)]
pub struct Lbfgs {
    memory: usize,
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    iterations: usize,
}

impl Lbfgs {
    pub fn new(memory: usize) -> Result<Self> {
        if memory == 0 {
            return Err(Error::InvalidArgument("LBFGS memory must be at least 1".into()));
        }
        Ok(Self {
            memory,
            s: VecDeque::new(),
            y: VecDeque::new(),
            iterations: 0,
        })
    }

    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let k = self.s.len();
        let mut alpha = vec![0.0; k];
        let mut rho = vec![0.0; k];
        for i in (0..k).rev() {
            rho[i] = 1.0 / dot(&self.y[i], &self.s[i]);
            alpha[i] = rho[i] * dot(&self.s[i], &q);
            axpy(&mut q, -alpha[i], &self.y[i]);
        }
        let gamma = match (self.s.back(), self.y.back()) {
            (Some(s), Some(y)) => dot(s, y) / dot(y, y),
            _ => 1.0 / norm(g).max(f64::MIN_POSITIVE),
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for i in 0..k {
            let b = rho[i] * dot(&self.y[i], &q);
            axpy(&mut q, alpha[i] - b, &self.s[i]);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    /// One iteration from `(x, fx, g)`; updates all three in place. Fails
    /// when 40 step halvings do not satisfy the Armijo condition.
    pub fn step<F>(&mut self, x: &mut Vec<f64>, fx: &mut f64, g: &mut Vec<f64>, f: &mut F) -> Result<()>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        self.iterations += 1;
        let mut d = self.direction(g);
        let mut slope = dot(g, &d);
        if !(slope < 0.0) {
            self.s.clear();
            self.y.clear();
            d = self.direction(g);
            slope = dot(g, &d);
        }
        let mut alpha = 1.0;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            let (ft, gt) = f(&trial)?;
            if ft.is_finite() && ft <= *fx + ARMIJO_C * alpha * slope {
                let s: Vec<f64> = d.iter().map(|v| alpha * v).collect();
                let y: Vec<f64> = gt.iter().zip(g.iter()).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * norm(&s) * norm(&y) {
                    if self.s.len() == self.memory {
                        self.s.pop_front();
                        self.y.pop_front();
                    }
                    self.s.push_back(s);
                    self.y.push_back(y);
                }
                *x = trial;
                *fx = ft;
                *g = gt;
                return Ok(());
            }
            alpha *= 0.5;
        }
        Err(Error::LineSearchStall {
            iteration: self.iterations,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsReport {
    pub x: Vec<f64>,
    /// Loss at the start and after every iteration.
    pub loss_trace: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn minimize_lbfgs<F>(mut f: F, x0: &[f64], opts: &LbfgsOptions) -> Result<LbfgsReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut solver = Lbfgs::new(opts.memory)?;
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue("LBFGS starting point".into()));
    }
    let mut trace = vec![fx];
    let mut iterations = 0;
    while norm(&g) > opts.grad_tol && iterations < opts.max_iter {
        solver.step(&mut x, &mut fx, &mut g, &mut f)?;
        iterations += 1;
        trace.push(fx);
    }
    let grad_norm = norm(&g);
    Ok(LbfgsReport {
        x,
        loss_trace: trace,
        grad_norm,
        iterations,
        converged: grad_norm <= opts.grad_tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmOptions {
    pub max_iter: usize,
    pub lambda0: f64,
    pub increase: f64,
    pub decrease: f64,
    /// Stop when `max |J^T r| <= grad_tol`.
    pub grad_tol: f64,
    /// Stop when `|dx| <= step_tol * (|x| + step_tol)`.
    pub step_tol: f64,
    /// Stop when an accepted step improves the cost by less than this fraction.
    pub cost_tol: f64,
    pub lambda_max: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            lambda0: 1e-3,
            increase: 10.0,
            decrease: 10.0,
            grad_tol: 1e-10,
            step_tol: 1e-12,
            cost_tol: 1e-14,
            lambda_max: 1e16,
        }
    }
}

/// Residual vector and Jacobian provider for [`minimize_lm`].
pub trait LeastSquaresProblem {
    fn residuals(&mut self, x: &[f64]) -> Result<DVector<f64>>;
    fn jacobian(&mut self, x: &[f64]) -> Result<DMatrix<f64>>;
}

/// Adapts a pair of closures to [`LeastSquaresProblem`].
pub struct FnProblem<R, J> {
    pub residuals: R,
    pub jacobian: J,
}

impl<R, J> LeastSquaresProblem for FnProblem<R, J>
where
    R: FnMut(&[f64]) -> Result<DVector<f64>>,
    J: FnMut(&[f64]) -> Result<DMatrix<f64>>,
{
    fn residuals(&mut self, x: &[f64]) -> Result<DVector<f64>> {
        (self.residuals)(x)
    }

    fn jacobian(&mut self, x: &[f64]) -> Result<DMatrix<f64>> {
        (self.jacobian)(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmTermination {
    GradientTolerance,
    StepTolerance,
    CostTolerance,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmReport {
    pub x: Vec<f64>,
    /// `0.5 * |r|^2` at `x`
    pub cost: f64,
    /// Cost at the start and after each accepted step.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub accepted: usize,
    pub lambda: f64,
    pub termination: LmTermination,
}

/// Levenberg-Marquardt with Marquardt scaling: solves
/// `(J^T J + lambda diag(J^T J)) dx = -J^T r`, accepting a step only when the
/// cost decreases.
pub fn minimize_lm<P: LeastSquaresProblem>(
    problem: &mut P,
    x0: &[f64],
    opts: &LmOptions,
) -> Result<LmReport> {
    let mut x = x0.to_vec();
    let mut r = problem.residuals(&x)?;
    if r.is_empty() {
        return Err(Error::InvalidArgument("no residuals".into()));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue("residual at the starting point".into()));
    }
    let mut cost = 0.5 * r.norm_squared();
    let mut trace = vec![cost];
    let mut lambda = opts.lambda0;
    let mut accepted = 0;
    let mut iterations = 0;
    let mut jac = problem.jacobian(&x)?;
    let mut grad = jac.tr_mul(&r);
    let report = |x: Vec<f64>, cost, trace, iterations, accepted, lambda, termination| LmReport {
        x,
        cost,
        cost_trace: trace,
        iterations,
        accepted,
        lambda,
        termination,
    };
    if grad.amax() <= opts.grad_tol {
        return Ok(report(x, cost, trace, 0, 0, lambda, LmTermination::GradientTolerance));
    }
    while iterations < opts.max_iter {
        iterations += 1;
        let jtj = jac.tr_mul(&jac);
        let dmax = jtj.diagonal().amax().max(1.0);
        let diag: DVector<f64> = jtj.diagonal().map(|d| d.max(1e-12 * dmax));
        let step = loop {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * diag[i];
            }
            match a.cholesky() {
                Some(ch) => {
                    let dx = ch.solve(&(-&grad));
                    if dx.iter().all(|v| v.is_finite()) {
                        break Some(dx);
                    }
                }
                None if lambda >= opts.lambda_max => {
                    return Err(Error::Singular {
                        context: "Levenberg-Marquardt normal equations".into(),
                        condition: condition_estimate(&jtj),
                    })
                }
                None => {}
            }
            lambda *= opts.increase;
            if lambda > opts.lambda_max {
                break None;
            }
        };
        let Some(dx) = step else {
            return Err(Error::LmStall { lambda });
        };
        let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if dx.norm() <= opts.step_tol * (xnorm + opts.step_tol) {
            return Ok(report(x, cost, trace, iterations, accepted, lambda, LmTermination::StepTolerance));
        }
        let trial: Vec<f64> = x.iter().zip(dx.iter()).map(|(a, b)| a + b).collect();
        let r_trial = match problem.residuals(&trial) {
            Ok(rt) if rt.iter().all(|v| v.is_finite()) => Some(rt),
            Ok(_) | Err(Error::Divergence { .. }) | Err(Error::NonFiniteValue(_)) => None,
            Err(e) => return Err(e),
        };
        let trial_cost = r_trial.as_ref().map(|rt| 0.5 * rt.norm_squared());
        match (r_trial, trial_cost) {
            (Some(rt), Some(c)) if c < cost => {
                let improvement = (cost - c) / cost.max(f64::MIN_POSITIVE);
                x = trial;
                r = rt;
                cost = c;
                trace.push(cost);
                accepted += 1;
                lambda = (lambda / opts.decrease).max(f64::MIN_POSITIVE);
                jac = problem.jacobian(&x)?;
                grad = jac.tr_mul(&r);
                if grad.amax() <= opts.grad_tol {
                    return Ok(report(x, cost, trace, iterations, accepted, lambda, LmTermination::GradientTolerance));
                }
                if improvement < opts.cost_tol {
                    return Ok(report(x, cost, trace, iterations, accepted, lambda, LmTermination::CostTolerance));
                }
            }
            _ => {
                lambda *= opts.increase;
                if lambda > opts.lambda_max {
                    return Err(Error::LmStall { lambda });
                }
            }
        }
    }
    Ok(report(x, cost, trace, iterations, accepted, lambda, LmTermination::MaxIterations))
}

/// Ratio of extreme singular values (infinite when singular).
pub fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Linear least squares `min |a x - b|` by Householder QR.
///
/// Columns that are numerically dependent on earlier ones are reported by
/// name (`names[j]` labels column `j`).
pub fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>, names: &[String]) -> Result<DVector<f64>> {
    let (m, n) = a.shape();
    if b.len() != m || names.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{m}x{n} design, {} targets, {} names",
            b.len(),
            names.len()
        )));
    }
    if m < n {
        return Err(Error::RankDeficient {
            columns: names[m..].to_vec(),
        });
    }
    let dependent = dependent_columns(a);
    if !dependent.is_empty() {
        return Err(Error::RankDeficient {
            columns: dependent.into_iter().map(|j| names[j].clone()).collect(),
        });
    }
    let qr = a.clone().qr();
    let mut qtb = b.clone();
    qr.q_tr_mul(&mut qtb);
    let r = qr.r();
    let x = r
        .solve_upper_triangular(&qtb.rows(0, n).into_owned())
        .ok_or_else(|| Error::Singular {
            context: "least squares".into(),
            condition: f64::INFINITY,
        })?;
    Ok(x)
}

/// Indices of columns lying (to 1e-10 relative) in the span of the columns
/// before them; modified Gram-Schmidt with one reorthogonalization pass.
fn dependent_columns(a: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..a.ncols() {
        let col = a.column(j).into_owned();
        let scale = col.norm();
        if scale == 0.0 {
            dependent.push(j);
            continue;
        }
        let mut v = col / scale;
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let r = v.norm();
        if r <= 1e-10 {
            dependent.push(j);
        } else {
            basis.push(v / r);
        }
    }
    dependent
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn least_squares_exact_and_rank_checks() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let b = DVector::from_column_slice(&[1.0, 3.0, 5.0, 7.0]);
        let names = vec!["c".to_string(), "t".to_string()];
        let x = least_squares(&a, &b, &names).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 2.0).abs() < 1e-12);
        let dup = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 2.0, 2.0, 1.0, 1.0, 3.0, 0.5, 0.5]);
        let names3: Vec<String> = ["a", "b", "b2"].iter().map(|s| s.to_string()).collect();
        match least_squares(&dup, &DVector::zeros(3), &names3) {
            Err(Error::RankDeficient { columns }) => assert_eq!(columns, ["b2"]),
            other => panic!("{other:?}"),
        }
    }
    use approx::assert_relative_eq;

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let opts = TrainingOptions::default();
        let mut st = FirstOrderState::new(Solver::Adam, 3).unwrap();
        let mut p = vec![1.0, -2.0, 0.5];
        step_first_order(&mut st, &mut p, &[0.0; 3], &opts).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn sgdm_without_momentum_is_gradient_descent() {
        let opts = TrainingOptions {
            momentum: 0.0,
            learn_rate: 0.1,
            ..TrainingOptions::with_solver(Solver::Sgdm)
        };
        let mut st = FirstOrderState::new(Solver::Sgdm, 2).unwrap();
        let mut p = vec![1.0, 2.0];
        step_first_order(&mut st, &mut p, &[0.5, -1.0], &opts).unwrap();
        assert_eq!(p, vec![1.0 - 0.1 * 0.5, 2.0 + 0.1]);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let opts = TrainingOptions::default();
        let mut st = FirstOrderState::new(Solver::Adam, 2).unwrap();
        let mut p = vec![0.0, 0.0];
        step_first_order(&mut st, &mut p, &[1.0, 1.0], &opts).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction
        let expected = -0.001 * 1.0 / (1.0 + 1e-8);
        assert_relative_eq!(p[0], expected, epsilon = 1e-18);
        assert_relative_eq!(p[1], expected, epsilon = 1e-18);
    }

    #[test]
    fn rejects_nonfinite_gradient_and_lbfgs_state() {
        let opts = TrainingOptions::default();
        let mut st = FirstOrderState::new(Solver::Rmsprop, 1).unwrap();
        let mut p = vec![0.0];
        assert!(matches!(
            step_first_order(&mut st, &mut p, &[f64::NAN], &opts),
            Err(Error::NonFiniteGradient)
        ));
        assert!(FirstOrderState::new(Solver::Lbfgs, 1).is_err());
    }

    #[test]
    fn lbfgs_quadratic() {
        let rep = minimize_lbfgs(
            |x| Ok((0.5 * dot(x, x), x.to_vec())),
            &[1.0, 1.0],
            &LbfgsOptions::default(),
        )
        .unwrap();
        assert!(rep.iterations <= 10);
        assert!(norm(&rep.x) <= 1e-10);
        assert!(rep.loss_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn lbfgs_stationary_start() {
        let rep = minimize_lbfgs(
            |x| Ok((0.5 * dot(x, x), x.to_vec())),
            &[0.0, 0.0],
            &LbfgsOptions::default(),
        )
        .unwrap();
        assert_eq!(rep.iterations, 0);
        assert_eq!(rep.x, vec![0.0, 0.0]);
    }

    #[test]
    fn lm_stationary_start_keeps_lambda() {
        let opts = LmOptions::default();
        let mut p = FnProblem {
            residuals: |x: &[f64]| Ok(DVector::from_vec(vec![x[0] - 1.0])),
            jacobian: |_: &[f64]| Ok(DMatrix::from_element(1, 1, 1.0)),
        };
        let rep = minimize_lm(&mut p, &[1.0], &opts).unwrap();
        assert_eq!(rep.accepted, 0);
        assert_eq!(rep.iterations, 0);
        assert_eq!(rep.lambda, opts.lambda0);
    }

    #[test]
    fn lm_square_root() {
        let mut p = FnProblem {
            residuals: |x: &[f64]| Ok(DVector::from_vec(vec![x[0] * x[0] - 4.0])),
            jacobian: |x: &[f64]| Ok(DMatrix::from_element(1, 1, 2.0 * x[0])),
        };
        let rep = minimize_lm(&mut p, &[1.0], &LmOptions::default()).unwrap();
        assert!((rep.x[0] - 2.0).abs() < 1e-8);
        assert!(rep.cost_trace.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn lm_rejects_nonfinite_start() {
        let mut p = FnProblem {
            residuals: |_: &[f64]| Ok(DVector::from_vec(vec![f64::INFINITY])),
            jacobian: |_: &[f64]| Ok(DMatrix::from_element(1, 1, 1.0)),
        };
        assert!(minimize_lm(&mut p, &[0.0], &LmOptions::default()).is_err());
    }
}
