//! Hammerstein-Wiener models: per-channel static input nonlinearities, a
//! discrete linear state-space block and per-channel static output
//! nonlinearities in series.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mlp::{create_mlp, Activation, InitSpec, MlpNetwork, MlpVars};
use crate::optim::{least_squares, minimize_lm, FnProblem, LmOptions, LmReport};
use crate::signal_data::{fit_percent, NormalizationState, SignalTable};

/// `DMatrix` stored as a list of rows.
mod rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Shaped {
        rows: usize,
        cols: usize,
        data: Vec<Vec<f64>>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        Shaped {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let sh = Shaped::deserialize(d)?;
        if sh.data.len() != sh.rows || sh.data.iter().any(|r| r.len() != sh.cols) {
            return Err(serde::de::Error::custom("matrix rows disagree with its shape"));
        }
        Ok(DMatrix::from_fn(sh.rows, sh.cols, |r, c| sh.data[r][c]))
    }
}

/// `x(t+1) = A x(t) + B v(t)`, `w(t) = C x(t) + D v(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSsBlock {
    #[serde(with = "rows")]
    pub a: DMatrix<f64>,
    #[serde(with = "rows")]
    pub b: DMatrix<f64>,
    #[serde(with = "rows")]
    pub c: DMatrix<f64>,
    #[serde(with = "rows")]
    pub d: DMatrix<f64>,
    pub ts: f64,
}

impl LinearSsBlock {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>, ts: f64) -> Result<Self> {
        let blk = Self { a, b, c, d, ts };
        blk.validate()?;
        Ok(blk)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        let ok = self.a.ncols() == n
            && self.b.nrows() == n
            && self.c.ncols() == n
            && self.d.nrows() == self.c.nrows()
            && self.d.ncols() == self.b.ncols();
        if !ok {
            return Err(Error::DimensionMismatch(format!(
                "A {:?}, B {:?}, C {:?}, D {:?}",
                self.a.shape(),
                self.b.shape(),
                self.c.shape(),
                self.d.shape()
            )));
        }
        if !(self.ts > 0.0) {
            return Err(Error::InvalidArgument("linear block needs a positive sample time".into()));
        }
        Ok(())
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn num_inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn num_outputs(&self) -> usize {
        self.c.nrows()
    }

    /// Response to `v` (`N x nu`) from the zero state.
    pub fn simulate(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if v.ncols() != self.num_inputs() {
            return Err(Error::DimensionMismatch(format!(
                "block has {} inputs, signal has {}",
                self.num_inputs(),
                v.ncols()
            )));
        }
        let mut x = DVector::zeros(self.order());
        let mut w = DMatrix::zeros(v.nrows(), self.num_outputs());
        for t in 0..v.nrows() {
            let vt = v.row(t).transpose();
            let wt = &self.c * &x + &self.d * &vt;
            if wt.iter().any(|e| !e.is_finite()) {
                return Err(Error::Divergence { step: t, segment: None });
            }
            w.set_row(t, &wt.transpose());
            x = &self.a * &x + &self.b * &vt;
        }
        Ok(w)
    }

    fn params(&self) -> Vec<f64> {
        let mut p = Vec::new();
        for m in [&self.a, &self.b, &self.c, &self.d] {
            p.extend(m.transpose().iter());
        }
        p
    }

    fn param_count(&self) -> usize {
        self.a.len() + self.b.len() + self.c.len() + self.d.len()
    }

    fn set_params(&mut self, p: &[f64]) {
        let mut off = 0;
        for m in [&mut self.a, &mut self.b, &mut self.c, &mut self.d] {
            let (r, c) = m.shape();
            *m = DMatrix::from_row_slice(r, c, &p[off..off + r * c]);
            off += r * c;
        }
    }
}

/// Scalar static map of one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StaticNonlinearity {
    Identity,
    /// network `R -> R`
    Network { net: MlpNetwork },
    /// `c0 + c1 x + c2 x^2 + ...`
    Polynomial { coeffs: Vec<f64> },
}

impl StaticNonlinearity {
    pub fn network(layer_sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        Ok(StaticNonlinearity::Network {
            net: create_mlp(1, 1, layer_sizes, activation, InitSpec::glorot(seed))?,
        })
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, StaticNonlinearity::Identity)
    }

    fn validate(&self) -> Result<()> {
        match self {
            StaticNonlinearity::Network { net } if net.input_dim() != 1 || net.output_dim() != 1 => {
                Err(Error::DimensionMismatch("static nonlinearity networks map R -> R".into()))
            }
            StaticNonlinearity::Polynomial { coeffs } if coeffs.is_empty() => {
                Err(Error::InvalidArgument("polynomial needs at least one coefficient".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        Ok(match self {
            StaticNonlinearity::Identity => x,
            StaticNonlinearity::Network { net } => net.forward(&[x])?[0],
            StaticNonlinearity::Polynomial { coeffs } => coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c),
        })
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            StaticNonlinearity::Identity => Vec::new(),
            StaticNonlinearity::Network { net } => net.params(),
            StaticNonlinearity::Polynomial { coeffs } => coeffs.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            StaticNonlinearity::Identity => 0,
            StaticNonlinearity::Network { net } => net.param_count(),
            StaticNonlinearity::Polynomial { coeffs } => coeffs.len(),
        }
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        match self {
            StaticNonlinearity::Identity => Ok(()),
            StaticNonlinearity::Network { net } => net.set_params(p),
            StaticNonlinearity::Polynomial { coeffs } => {
                coeffs.copy_from_slice(p);
                Ok(())
            }
        }
    }

    fn record<'t>(&self, tape: &'t Tape) -> NlVars<'t> {
        match self {
            StaticNonlinearity::Identity => NlVars::Identity,
            StaticNonlinearity::Network { net } => NlVars::Network(net.record(tape)),
            StaticNonlinearity::Polynomial { coeffs } => {
                NlVars::Polynomial(coeffs.iter().map(|&c| tape.scalar(c)).collect())
            }
        }
    }

    /// Replaces `f(x)` by `f(g x)`.
    fn absorb_gain(&mut self, g: f64) {
        match self {
            StaticNonlinearity::Identity => unreachable!("identity maps cannot absorb a gain"),
            StaticNonlinearity::Network { net } => {
                let w = &mut net.layers_mut()[0].weights;
                *w *= g;
            }
            StaticNonlinearity::Polynomial { coeffs } => {
                let mut s = 1.0;
                for c in coeffs.iter_mut() {
                    *c *= s;
                    s *= g;
                }
            }
        }
    }
}

enum NlVars<'t> {
    Identity,
    Network(MlpVars<'t>),
    Polynomial(Vec<Var<'t>>),
}

impl<'t> NlVars<'t> {
    fn leaves(&self) -> Vec<Var<'t>> {
        match self {
            NlVars::Identity => Vec::new(),
            NlVars::Network(n) => n.leaves(),
            NlVars::Polynomial(c) => c.clone(),
        }
    }

    /// Applies the map to an `N x 1` column.
    fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            NlVars::Identity => Ok(x),
            NlVars::Network(n) => n.forward(x),
            NlVars::Polynomial(c) => {
                let last = c.len() - 1;
                let mut acc = x.matmul(c[last])?;
                for k in (0..last).rev() {
                    acc = acc.add_row(c[k])?;
                    if k > 0 {
                        acc = acc.mul(x)?;
                    }
                }
                if last == 0 {
                    // constant map: x * 0 + c0
                    return x.scale(0.0).add_row(c[0]);
                }
                Ok(acc)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HwModel {
    input_nl: Vec<StaticNonlinearity>,
    linear: LinearSsBlock,
    output_nl: Vec<StaticNonlinearity>,
    normalization: NormalizationState,
    input_names: Vec<String>,
    output_names: Vec<String>,
}

impl HwModel {
    /// Identity nonlinearities around `linear`.
    pub fn new(linear: LinearSsBlock) -> Result<Self> {
        linear.validate()?;
        let (nu, ny) = (linear.num_inputs(), linear.num_outputs());
        Ok(Self {
            input_nl: vec![StaticNonlinearity::Identity; nu],
            output_nl: vec![StaticNonlinearity::Identity; ny],
            normalization: NormalizationState::identity(nu, ny),
            input_names: (1..=nu).map(|i| format!("u{i}")).collect(),
            output_names: (1..=ny).map(|i| format!("y{i}")).collect(),
            linear,
        })
    }

    pub fn with_input_nl(mut self, nl: Vec<StaticNonlinearity>) -> Result<Self> {
        if nl.len() != self.linear.num_inputs() {
            return Err(Error::DimensionMismatch("one input nonlinearity per input".into()));
        }
        nl.iter().try_for_each(StaticNonlinearity::validate)?;
        self.input_nl = nl;
        Ok(self)
    }

    pub fn with_output_nl(mut self, nl: Vec<StaticNonlinearity>) -> Result<Self> {
        if nl.len() != self.linear.num_outputs() {
            return Err(Error::DimensionMismatch("one output nonlinearity per output".into()));
        }
        nl.iter().try_for_each(StaticNonlinearity::validate)?;
        self.output_nl = nl;
        Ok(self)
    }

    pub fn with_normalization(mut self, n: NormalizationState) -> Result<Self> {
        if n.inputs.len() != self.linear.num_inputs() || n.outputs.len() != self.linear.num_outputs() {
            return Err(Error::DimensionMismatch("normalization channel counts".into()));
        }
        self.normalization = n;
        Ok(self)
    }

    pub fn with_channel_names(mut self, inputs: Vec<String>, outputs: Vec<String>) -> Result<Self> {
        if inputs.len() != self.linear.num_inputs() || outputs.len() != self.linear.num_outputs() {
            return Err(Error::DimensionMismatch("channel name counts".into()));
        }
        self.input_names = inputs;
        self.output_names = outputs;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.linear.validate()?;
        if self.input_nl.len() != self.linear.num_inputs()
            || self.output_nl.len() != self.linear.num_outputs()
            || self.input_names.len() != self.linear.num_inputs()
            || self.output_names.len() != self.linear.num_outputs()
            || self.normalization.inputs.len() != self.linear.num_inputs()
            || self.normalization.outputs.len() != self.linear.num_outputs()
        {
            return Err(Error::Document("channel counts disagree with the linear block".into()));
        }
        self.input_nl.iter().chain(&self.output_nl).try_for_each(StaticNonlinearity::validate)
    }

    pub fn linear(&self) -> &LinearSsBlock {
        &self.linear
    }

    pub fn input_nl(&self) -> &[StaticNonlinearity] {
        &self.input_nl
    }

    pub fn output_nl(&self) -> &[StaticNonlinearity] {
        &self.output_nl
    }

    pub fn normalization(&self) -> &NormalizationState {
        &self.normalization
    }

    pub fn input_names(&self) -> &[String] {
        &self.input_names
    }

    pub fn output_names(&self) -> &[String] {
        &self.output_names
    }

    /// Input nonlinearities, then `A, B, C, D` row-major, then output
    /// nonlinearities.
    pub fn params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.input_nl.iter().flat_map(|n| n.params()).collect();
        p.extend(self.linear.params());
        p.extend(self.output_nl.iter().flat_map(|n| n.params()));
        p
    }

    pub fn param_count(&self) -> usize {
        self.input_nl.iter().chain(&self.output_nl).map(|n| n.param_count()).sum::<usize>()
            + self.linear.param_count()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "model has {} parameters, got {}",
                self.param_count(),
                p.len()
            )));
        }
        let mut off = 0;
        for n in &mut self.input_nl {
            let k = n.param_count();
            n.set_params(&p[off..off + k])?;
            off += k;
        }
        let k = self.linear.param_count();
        self.linear.set_params(&p[off..off + k]);
        off += k;
        for n in &mut self.output_nl {
            let k = n.param_count();
            n.set_params(&p[off..off + k])?;
            off += k;
        }
        Ok(())
    }

    fn check_inputs(&self, data: &SignalTable) -> Result<()> {
        if data.num_inputs() != self.linear.num_inputs() {
            return Err(Error::DimensionMismatch(format!(
                "model has {} inputs, data has {}",
                self.linear.num_inputs(),
                data.num_inputs()
            )));
        }
        Ok(())
    }

    /// Output of the linear block (before the output nonlinearities).
    pub fn linear_response(&self, data: &SignalTable) -> Result<DMatrix<f64>> {
        self.check_inputs(data)?;
        let u = data.inputs();
        let mut v = DMatrix::zeros(u.nrows(), u.ncols());
        for (c, nl) in self.input_nl.iter().enumerate() {
            for t in 0..u.nrows() {
                v[(t, c)] = nl.eval(self.normalization.inputs.forward(c, u[(t, c)]))?;
            }
        }
        self.linear.simulate(&v)
    }

    /// `N x ny` response to the inputs of `data` from the zero state.
    pub fn simulate(&self, data: &SignalTable) -> Result<DMatrix<f64>> {
        let mut w = self.linear_response(data)?;
        for (c, nl) in self.output_nl.iter().enumerate() {
            for t in 0..w.nrows() {
                let y = self.normalization.outputs.inverse(c, nl.eval(w[(t, c)])?);
                if !y.is_finite() {
                    return Err(Error::Divergence { step: t, segment: None });
                }
                w[(t, c)] = y;
            }
        }
        Ok(w)
    }

    /// Rescales each output row of `C` and `D` to unit norm and moves the
    /// gain into the output nonlinearity. Channels with an identity output
    /// map are left alone.
    pub fn normalize_gain(&mut self) {
        for (i, nl) in self.output_nl.iter_mut().enumerate() {
            if nl.is_identity() {
                continue;
            }
            let g = self.linear.c.row(i).norm();
            if !(g > 0.0) || !g.is_finite() {
                continue;
            }
            self.linear.c.row_mut(i).scale_mut(1.0 / g);
            self.linear.d.row_mut(i).scale_mut(1.0 / g);
            nl.absorb_gain(g);
        }
    }

    /// Records the simulated outputs (`N x ny`, normalized units before the
    /// output inverse scaling) of one record.
    fn record_rollout<'t>(&self, tape: &'t Tape, vars: &HwVars<'t>, data: &SignalTable) -> Result<Var<'t>> {
        let u = data.inputs();
        let n = u.nrows();
        let nu = u.ncols();
        let cols = (0..nu)
            .map(|c| {
                let col: Vec<f64> = (0..n).map(|t| self.normalization.inputs.forward(c, u[(t, c)])).collect();
                vars.input_nl[c].forward(tape.leaf(col, n, 1)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let v = tape.concat(&cols)?;
        let bv = v.matmul_t(vars.b)?;
        let dv = v.matmul_t(vars.d)?;
        let mut x = tape.leaf(vec![0.0; self.linear.order()], 1, self.linear.order())?;
        let mut rows = Vec::with_capacity(n);
        for t in 0..n {
            let w = x.matmul_t(vars.c)?.add(dv.rows_range(t, 1)?)?;
            if !w.all_finite() {
                return Err(Error::Divergence { step: t, segment: None });
            }
            rows.push(w);
            if t + 1 < n {
                x = x.matmul_t(vars.a)?.add(bv.rows_range(t, 1)?)?;
            }
        }
        let w = tape.stack(&rows)?;
        let outs = (0..self.linear.num_outputs())
            .map(|c| vars.output_nl[c].forward(w.slice(c, 1)?))
            .collect::<Result<Vec<_>>>()?;
        tape.concat(&outs)
    }

    fn record<'t>(&self, tape: &'t Tape) -> HwVars<'t> {
        let m = |x: &DMatrix<f64>| tape.matrix(x);
        HwVars {
            input_nl: self.input_nl.iter().map(|n| n.record(tape)).collect(),
            a: m(&self.linear.a),
            b: m(&self.linear.b),
            c: m(&self.linear.c),
            d: m(&self.linear.d),
            output_nl: self.output_nl.iter().map(|n| n.record(tape)).collect(),
        }
    }
}

struct HwVars<'t> {
    input_nl: Vec<NlVars<'t>>,
    a: Var<'t>,
    b: Var<'t>,
    c: Var<'t>,
    d: Var<'t>,
    output_nl: Vec<NlVars<'t>>,
}

impl<'t> HwVars<'t> {
    fn leaves(&self) -> Vec<Var<'t>> {
        let mut v: Vec<Var<'t>> = self.input_nl.iter().flat_map(|n| n.leaves()).collect();
        v.extend([self.a, self.b, self.c, self.d]);
        v.extend(self.output_nl.iter().flat_map(|n| n.leaves()));
        v
    }
}

/// Order selection result of [`fit_linear_auto`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub block: LinearSsBlock,
    /// selected order per output
    pub orders: Vec<usize>,
    /// `(order, AIC)` of every order that could be fitted, per output
    pub aic: Vec<Vec<(usize, f64)>>,
}

/// ARX(n, n) fits for `n = 1..=max_order` by least squares, order chosen by
/// `AIC = N log(SSE / N) + 2 n (1 + nu)`, converted to observer canonical
/// form. Each output gets its own multi-input ARX model; the blocks are
/// stacked block-diagonally.
pub fn fit_linear_auto(data: &SignalTable, max_order: usize) -> Result<LinearFit> {
    if max_order == 0 {
        return Err(Error::InvalidArgument("max_order must be at least 1".into()));
    }
    let n_total = data.len();
    if n_total < 10 * max_order {
        return Err(Error::InvalidArgument(format!(
            "{n_total} samples; at least {} needed for order {max_order}",
            10 * max_order
        )));
    }
    let u = data.inputs();
    let y = data.outputs();
    let nu = u.ncols();
    let ny = y.ncols();
    let rows = n_total - max_order;
    let mut blocks = Vec::with_capacity(ny);
    let mut orders = Vec::with_capacity(ny);
    let mut aics = Vec::with_capacity(ny);
    for o in 0..ny {
        let target = DVector::from_fn(rows, |k, _| y[(k + max_order, o)]);
        let energy = target.norm_squared();
        let mut best: Option<(f64, usize, DVector<f64>)> = None;
        let mut table = Vec::new();
        for n in 1..=max_order {
            let cols = n * (1 + nu);
            let mut phi = DMatrix::zeros(rows, cols);
            let mut names = Vec::with_capacity(cols);
            for i in 1..=n {
                names.push(format!("{}(t-{i})", data.output_names()[o]));
            }
            for c in 0..nu {
                for i in 1..=n {
                    names.push(format!("{}(t-{i})", data.input_names()[c]));
                }
            }
            for k in 0..rows {
                let t = k + max_order;
                for i in 1..=n {
                    phi[(k, i - 1)] = -y[(t - i, o)];
                }
                for c in 0..nu {
                    for i in 1..=n {
                        phi[(k, n + c * n + i - 1)] = u[(t - i, c)];
                    }
                }
            }
            let theta = match least_squares(&phi, &target, &names) {
                Ok(th) => th,
                Err(Error::RankDeficient { .. }) => continue,
                Err(e) => return Err(e),
            };
            let sse = (&target - &phi * &theta).norm_squared();
            let floor = 1e-20 * energy.max(f64::MIN_POSITIVE);
            let aic = rows as f64 * (sse.max(floor) / rows as f64).ln() + 2.0 * cols as f64;
            table.push((n, aic));
            if best.as_ref().is_none_or(|b| aic < b.0) {
                best = Some((aic, n, theta));
            }
        }
        let (_, n, theta) = best.ok_or_else(|| Error::RankDeficient {
            columns: vec![format!("every ARX order for output {}", data.output_names()[o])],
        })?;
        blocks.push(observer_form(n, nu, &theta));
        orders.push(n);
        aics.push(table);
    }
    let total: usize = orders.iter().sum();
    let mut a = DMatrix::zeros(total, total);
    let mut b = DMatrix::zeros(total, nu);
    let mut c = DMatrix::zeros(ny, total);
    let mut off = 0;
    for (o, (ab, bb, cb)) in blocks.into_iter().enumerate() {
        let n = ab.nrows();
        a.view_mut((off, off), (n, n)).copy_from(&ab);
        b.view_mut((off, 0), (n, nu)).copy_from(&bb);
        c.view_mut((o, off), (1, n)).copy_from(&cb);
        off += n;
    }
    Ok(LinearFit {
        block: LinearSsBlock::new(a, b, c, DMatrix::zeros(ny, nu), data.sample_time())?,
        orders,
        aic: aics,
    })
}

/// Observer canonical realization of
/// `y(t) + a1 y(t-1) + ... + an y(t-n) = sum_i b_i^T u(t-i)`;
/// `theta = [a1..an, b(u1)1..n, b(u2)1..n, ...]`.
fn observer_form(n: usize, nu: usize, theta: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        a[(i, 0)] = -theta[i];
        if i + 1 < n {
            a[(i, i + 1)] = 1.0;
        }
    }
    let b = DMatrix::from_fn(n, nu, |i, c| theta[n + c * n + i]);
    let mut c = DMatrix::zeros(1, n);
    c[(0, 0)] = 1.0;
    (a, b, c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HwTrainingOptions {
    pub lm: LmOptions,
    /// Fit the output nonlinearities to the linear block's response before
    /// the joint fit.
    pub prefit_output: bool,
    pub normalize_gain: bool,
}

impl Default for HwTrainingOptions {
    fn default() -> Self {
        Self {
            lm: LmOptions::default(),
            prefit_output: true,
            normalize_gain: true,
        }
    }
}

fn physical_targets(model: &HwModel, data: &SignalTable) -> Vec<f64> {
    let y = data.outputs();
    let mut out = Vec::with_capacity(y.len());
    for t in 0..y.nrows() {
        for c in 0..y.ncols() {
            out.push(model.normalization.outputs.forward(c, y[(t, c)]));
        }
    }
    out
}

/// Residuals `(y_sim - y)` in normalized output units, row-major per
/// record, and optionally the Jacobian with respect to `params`.
fn hw_residuals(
    template: &HwModel,
    data: &[SignalTable],
    params: &[f64],
    with_jacobian: bool,
) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
    let mut model = template.clone();
    model.set_params(params)?;
    let mut res = Vec::new();
    let mut jac_blocks = Vec::new();
    for d in data {
        let tape = Tape::new();
        let vars = model.record(&tape);
        let out = model.record_rollout(&tape, &vars, d)?;
        let target = physical_targets(&model, d);
        let r = out.sub(tape.leaf(target, d.len(), model.linear.num_outputs())?)?;
        res.extend(r.value());
        if with_jacobian {
            jac_blocks.push(tape.jacobian(r, &vars.leaves())?);
        }
    }
    let jac = with_jacobian.then(|| {
        let mut j = DMatrix::zeros(res.len(), params.len());
        let mut k = 0;
        for b in jac_blocks {
            j.rows_mut(k, b.nrows()).copy_from(&b);
            k += b.nrows();
        }
        j
    });
    Ok((DVector::from_vec(res), jac))
}

/// Fits only the output nonlinearities to map the current linear response
/// onto the measured outputs.
fn prefit_output(model: &HwModel, data: &[SignalTable], lm: &LmOptions) -> Result<HwModel> {
    let n_out: usize = model.output_nl.iter().map(|n| n.param_count()).sum();
    if n_out == 0 {
        return Ok(model.clone());
    }
    let full = model.params();
    let off = full.len() - n_out;
    let mut problem = FnProblem {
        residuals: |p: &[f64]| {
            let mut q = full.clone();
            q[off..].copy_from_slice(p);
            Ok(hw_residuals(model, data, &q, false)?.0)
        },
        jacobian: |p: &[f64]| {
            let mut q = full.clone();
            q[off..].copy_from_slice(p);
            let (_, j) = hw_residuals(model, data, &q, true)?;
            Ok(j.expect("requested").columns(off, n_out).into_owned())
        },
    };
    let rep = minimize_lm(&mut problem, &full[off..], lm)?;
    let mut q = full.clone();
    q[off..].copy_from_slice(&rep.x);
    let mut m = model.clone();
    m.set_params(&q)?;
    Ok(m)
}

/// Joint Levenberg-Marquardt fit of every parameter on the simulation error.
pub fn train_hw(model: &HwModel, data: &[SignalTable], opts: &HwTrainingOptions) -> Result<(HwModel, LmReport)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training data".into()));
    }
    for d in data {
        model.check_inputs(d)?;
        if d.num_outputs() != model.linear.num_outputs() {
            return Err(Error::DimensionMismatch("output channel count".into()));
        }
    }
    let start = if opts.prefit_output {
        prefit_output(model, data, &opts.lm)?
    } else {
        model.clone()
    };
    let mut problem = FnProblem {
        residuals: |p: &[f64]| Ok(hw_residuals(&start, data, p, false)?.0),
        jacobian: |p: &[f64]| Ok(hw_residuals(&start, data, p, true)?.1.expect("requested")),
    };
    let rep = minimize_lm(&mut problem, &start.params(), &opts.lm)?;
    let mut trained = start.clone();
    trained.set_params(&rep.x)?;
    if opts.normalize_gain {
        trained.normalize_gain();
    }
    Ok((trained, rep))
}

/// Per-output fit percent of [`HwModel::simulate`] against `data`.
pub fn hw_fit(model: &HwModel, data: &SignalTable) -> Result<Vec<f64>> {
    fit_percent(data.outputs(), &model.simulate(data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delay() -> LinearSsBlock {
        LinearSsBlock::new(
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            1.0,
        )
        .unwrap()
    }

    fn table(u: &[f64], y: &[f64]) -> SignalTable {
        SignalTable::from_matrices(
            DMatrix::from_column_slice(u.len(), 1, u),
            DMatrix::from_column_slice(y.len(), 1, y),
            1.0,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn hammerstein_square_through_delay() {
        let m = HwModel::new(delay())
            .unwrap()
            .with_input_nl(vec![StaticNonlinearity::Polynomial {
                coeffs: vec![0.0, 0.0, 1.0],
            }])
            .unwrap();
        let y = m.simulate(&table(&[1.0, 2.0, 3.0], &[0.0; 3])).unwrap();
        assert_eq!(y.as_slice(), &[0.0, 1.0, 4.0]);
    }

    #[test]
    fn identity_maps_reproduce_linear_block() {
        let blk = LinearSsBlock::new(
            DMatrix::from_row_slice(2, 2, &[0.5, 1.0, -0.3, 0.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::from_element(1, 1, 0.1),
            1.0,
        )
        .unwrap();
        let u: Vec<f64> = (0..50).map(|k| (k as f64 * 0.7).sin()).collect();
        let d = table(&u, &vec![0.0; 50]);
        let m = HwModel::new(blk.clone()).unwrap();
        assert_eq!(m.simulate(&d).unwrap(), blk.simulate(d.inputs()).unwrap());
    }

    #[test]
    fn zero_output_network_is_constant() {
        let m = HwModel::new(delay())
            .unwrap()
            .with_output_nl(vec![StaticNonlinearity::Network {
                net: create_mlp(1, 1, &[3], Activation::Tanh, InitSpec::zeros()).unwrap(),
            }])
            .unwrap();
        let y = m.simulate(&table(&[1.0, -2.0, 5.0], &[0.0; 3])).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_order_recovered() {
        let n = 200;
        let u: Vec<f64> = (0..n).map(|k| if (k / 7) % 2 == 0 { 1.0 } else { -1.0 } + 0.3 * (k as f64).sin()).collect();
        let mut y = vec![0.0; n];
        for t in 1..n {
            y[t] = 0.9 * y[t - 1] + u[t - 1];
        }
        let fit = fit_linear_auto(&table(&u, &y), 10).unwrap();
        assert_eq!(fit.orders, [1]);
        assert!((fit.block.a[(0, 0)] - 0.9).abs() < 1e-6);
        assert!(fit_linear_auto(&table(&u[..50], &y[..50]), 10).is_err());
    }

    #[test]
    fn polynomial_tape_matches_eval() {
        let nl = StaticNonlinearity::Polynomial {
            coeffs: vec![0.5, -1.0, 0.25, 2.0],
        };
        let tape = Tape::new();
        let vars = nl.record(&tape);
        let xs = [0.0, 1.5, -2.0];
        let out = vars.forward(tape.leaf(xs.to_vec(), 3, 1).unwrap()).unwrap().value();
        for (x, o) in xs.iter().zip(out) {
            assert!((nl.eval(*x).unwrap() - o).abs() < 1e-13);
        }
        let c = StaticNonlinearity::Polynomial { coeffs: vec![3.0] };
        let v = c.record(&tape).forward(tape.leaf(xs.to_vec(), 3, 1).unwrap()).unwrap();
        assert_eq!(v.value(), vec![3.0; 3]);
    }

    #[test]
    fn gain_normalization_keeps_output() {
        let blk = LinearSsBlock::new(
            DMatrix::from_row_slice(2, 2, &[0.5, 1.0, -0.3, 0.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
            DMatrix::from_row_slice(1, 2, &[2.0, 1.0]),
            DMatrix::from_element(1, 1, 0.3),
            1.0,
        )
        .unwrap();
        let m = HwModel::new(blk)
            .unwrap()
            .with_output_nl(vec![StaticNonlinearity::network(&[4], Activation::Tanh, 3).unwrap()])
            .unwrap();
        let u: Vec<f64> = (0..40).map(|k| (k as f64 * 0.4).cos()).collect();
        let d = table(&u, &vec![0.0; 40]);
        let before = m.simulate(&d).unwrap();
        let mut n = m.clone();
        n.normalize_gain();
        assert!((n.linear.c.row(0).norm() - 1.0).abs() < 1e-15);
        let after = n.simulate(&d).unwrap();
        for (a, b) in before.iter().zip(after.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    fn wiener_block() -> LinearSsBlock {
        // poles 0.7 +- 0.4i
        LinearSsBlock::new(
            DMatrix::from_row_slice(2, 2, &[1.4, 1.0, -0.65, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.5, 0.3]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(1, 1),
            1.0,
        )
        .unwrap()
    }

    fn wiener_data(n: usize, seed: u64, amp: f64) -> SignalTable {
        let mut rng = crate::mlp::UniformStream::new(seed);
        let mut u = Vec::with_capacity(n);
        let mut level = 0.0;
        for k in 0..n {
            if k % 5 == 0 {
                level = rng.symmetric(amp);
            }
            u.push(level);
        }
        let truth = HwModel::new(wiener_block())
            .unwrap()
            .with_output_nl(vec![StaticNonlinearity::Polynomial { coeffs: vec![0.0, 1.0] }])
            .unwrap();
        let w = truth.linear_response(&table(&u, &vec![0.0; n])).unwrap();
        let y: Vec<f64> = w.iter().map(|v| v.tanh()).collect();
        table(&u, &y)
    }

    fn tanh_unit() -> StaticNonlinearity {
        let mut net = create_mlp(1, 1, &[1], Activation::Tanh, InitSpec::zeros()).unwrap();
        net.layers_mut()[0].weights[(0, 0)] = 1.0;
        net.layers_mut()[1].weights[(0, 0)] = 1.0;
        StaticNonlinearity::Network { net }
    }

    #[test]
    fn stationary_at_truth() {
        let d = wiener_data(300, 4, 1.0);
        let truth = HwModel::new(wiener_block()).unwrap().with_output_nl(vec![tanh_unit()]).unwrap();
        let (_, rep) = train_hw(&truth, &[d], &HwTrainingOptions::default()).unwrap();
        assert_eq!(rep.accepted, 0);
        assert!(rep.cost < 1e-20);
    }

    #[test]
    fn wiener_pipeline_beats_linear() {
        let est = wiener_data(600, 1, 1.0);
        let val = wiener_data(300, 2, 1.0);
        let lin = fit_linear_auto(&est, 10).unwrap();
        let base = HwModel::new(lin.block.clone()).unwrap();
        let base_fit = hw_fit(&base, &val).unwrap()[0];
        let init = base
            .with_output_nl(vec![StaticNonlinearity::network(&[5, 5], Activation::Tanh, 7).unwrap()])
            .unwrap();
        let (m, rep) = train_hw(&init, &[est], &HwTrainingOptions::default()).unwrap();
        for w in rep.cost_trace.windows(2) {
            assert!(w[1] < w[0]);
        }
        let fit = hw_fit(&m, &val).unwrap()[0];
        assert!(fit >= 95.0 && fit > base_fit, "fit {fit}, linear {base_fit}");
        let c = m.linear().c.row(0).norm();
        assert!((c - 1.0).abs() < 1e-12);
    }

    #[test]
    #[ignore = "AIC keeps adding lags to absorb the output nonlinearity on noise-free data"]
    fn wiener_order_two_selected() {
        let d = wiener_data(600, 1, 1.0);
        assert_eq!(fit_linear_auto(&d, 10).unwrap().orders, [2]);
    }

    #[test]
    fn resonant_second_order_selected() {
        let d = wiener_data(600, 1, 1.0);
        let w = HwModel::new(wiener_block()).unwrap().linear_response(&d).unwrap();
        let lin = table(d.inputs().as_slice(), w.as_slice());
        assert_eq!(fit_linear_auto(&lin, 10).unwrap().orders, [2]);
    }
}
