//! Nonlinear ARX models: a static mapping from a regressor dictionary to one
//! output, with one-step prediction, free-run simulation, training under
//! prediction or simulation focus, and proximal-gradient regressor
//! sparsification.
//!
//! Regressors are computed from physical signals and then z-scored (when the
//! model is normalized); the mapping works on scaled regressors and returns
//! the scaled output.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mlp::{create_mlp, Activation, InitSpec, MlpNetwork, MlpVars, UniformStream};
use crate::optim::{
    self, least_squares, minimize_lm, FirstOrderState, LeastSquaresProblem, Lbfgs, LmOptions, Solver,
    TrainingOptions,
};
use crate::regressors::{self, Channel, Lagged, Regressor, RegressorSpec, Variables};
use crate::signal_data::{fit_percent, ChannelScaling, NormalizationMethod, SignalTable};

/// Default sigmoid-network width.
pub const DEFAULT_SIGMOID_UNITS: usize = 10;

/// Mapping structure requested at model creation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MappingSpec {
    LinearInRegressors,
    SigmoidNetwork {
        #[serde(default = "default_units")]
        units: usize,
    },
    NeuralNetwork {
        layer_sizes: Vec<usize>,
        #[serde(default)]
        activation: Activation,
    },
}

fn default_units() -> usize {
    DEFAULT_SIGMOID_UNITS
}

/// Nonlinear part of a mapping, added to its linear term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Nonlinearity {
    None,
    /// `sum_k a_k sigmoid(v_k . (r - mu) + c_k)`
    Sigmoid {
        a: Vec<f64>,
        v: Vec<Vec<f64>>,
        c: Vec<f64>,
    },
    /// `net(r - mu)`
    Network { net: MlpNetwork },
}

/// `F(r) = theta . (r - mu) + d + nonlinear(r - mu)`; `mu` is zero for
/// linear-in-regressor mappings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingFcn {
    pub theta: Vec<f64>,
    pub offset: f64,
    pub means: Vec<f64>,
    pub nonlinear: Nonlinearity,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl MappingFcn {
    pub fn new(spec: &MappingSpec, regressors: usize, seed: u64) -> Result<Self> {
        let r = regressors;
        let nonlinear = match spec {
            MappingSpec::LinearInRegressors => Nonlinearity::None,
            MappingSpec::SigmoidNetwork { units } => {
                if *units == 0 {
                    return Err(Error::InvalidArgument("sigmoid network needs at least one unit".into()));
                }
                let mut rng = UniformStream::new(seed);
                let scale = (6.0 / (r + units) as f64).sqrt();
                let v = (0..*units).map(|_| (0..r).map(|_| rng.symmetric(scale)).collect()).collect();
                let c = (0..*units).map(|_| rng.symmetric(1.0)).collect();
                Nonlinearity::Sigmoid {
                    a: vec![0.0; *units],
                    v,
                    c,
                }
            }
            MappingSpec::NeuralNetwork {
                layer_sizes,
                activation,
            } => Nonlinearity::Network {
                net: create_mlp(r, 1, layer_sizes, *activation, InitSpec::glorot(seed))?,
            },
        };
        Ok(Self {
            theta: vec![0.0; r],
            offset: 0.0,
            means: vec![0.0; r],
            nonlinear,
        })
    }

    pub fn kind(&self) -> &'static str {
        match self.nonlinear {
            Nonlinearity::None => "linear_in_regressors",
            Nonlinearity::Sigmoid { .. } => "sigmoid_network",
            Nonlinearity::Network { .. } => "neural_network",
        }
    }

    pub fn num_regressors(&self) -> usize {
        self.theta.len()
    }

    fn validate(&self) -> Result<()> {
        let r = self.theta.len();
        let ok = self.means.len() == r
            && match &self.nonlinear {
                Nonlinearity::None => true,
                Nonlinearity::Sigmoid { a, v, c } => {
                    a.len() == v.len() && c.len() == v.len() && v.iter().all(|row| row.len() == r)
                }
                Nonlinearity::Network { net } => net.input_dim() == r && net.output_dim() == 1,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Document(format!("mapping fields disagree on {r} regressors")))
        }
    }

    /// `theta, offset`, then `a, v (row-major), c` or the network parameters.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.theta.clone();
        p.push(self.offset);
        match &self.nonlinear {
            Nonlinearity::None => {}
            Nonlinearity::Sigmoid { a, v, c } => {
                p.extend_from_slice(a);
                v.iter().for_each(|row| p.extend_from_slice(row));
                p.extend_from_slice(c);
            }
            Nonlinearity::Network { net } => p.extend(net.params()),
        }
        p
    }

    pub fn param_count(&self) -> usize {
        let r = self.theta.len();
        r + 1
            + match &self.nonlinear {
                Nonlinearity::None => 0,
                Nonlinearity::Sigmoid { a, .. } => a.len() * (r + 2),
                Nonlinearity::Network { net } => net.param_count(),
            }
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "mapping has {} parameters, got {}",
                self.param_count(),
                p.len()
            )));
        }
        let r = self.theta.len();
        self.theta.copy_from_slice(&p[..r]);
        self.offset = p[r];
        let rest = &p[r + 1..];
        match &mut self.nonlinear {
            Nonlinearity::None => {}
            Nonlinearity::Sigmoid { a, v, c } => {
                let k = a.len();
                a.copy_from_slice(&rest[..k]);
                for (i, row) in v.iter_mut().enumerate() {
                    row.copy_from_slice(&rest[k + i * r..k + (i + 1) * r]);
                }
                c.copy_from_slice(&rest[k + k * r..]);
            }
            Nonlinearity::Network { net } => net.set_params(rest)?,
        }
        Ok(())
    }

    /// Parameter indices belonging to each regressor: its linear coefficient
    /// and every first-layer weight that multiplies it.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let r = self.theta.len();
        (0..r)
            .map(|j| {
                let mut g = vec![j];
                match &self.nonlinear {
                    Nonlinearity::None => {}
                    Nonlinearity::Sigmoid { a, .. } => {
                        let k = a.len();
                        g.extend((0..k).map(|i| r + 1 + k + i * r + j));
                    }
                    Nonlinearity::Network { net } => {
                        let h = net.layers()[0].weights.nrows();
                        g.extend((0..h).map(|i| r + 1 + i * r + j));
                    }
                }
                g
            })
            .collect()
    }

    /// Output for one scaled regressor row.
    pub fn eval(&self, r: &[f64]) -> Result<f64> {
        let centered: Vec<f64> = r.iter().zip(&self.means).map(|(x, m)| x - m).collect();
        let mut out = self.offset + optim::dot(&self.theta, &centered);
        match &self.nonlinear {
            Nonlinearity::None => {}
            Nonlinearity::Sigmoid { a, v, c } => {
                for ((ak, vk), ck) in a.iter().zip(v).zip(c) {
                    out += ak * sigmoid(optim::dot(vk, &centered) + ck);
                }
            }
            Nonlinearity::Network { net } => out += net.forward(&centered)?[0],
        }
        Ok(out)
    }

    pub fn record<'t>(&self, tape: &'t Tape) -> MappingVars<'t> {
        let r = self.theta.len();
        let nonlinear = match &self.nonlinear {
            Nonlinearity::None => NonlinearVars::None,
            Nonlinearity::Sigmoid { a, v, c } => NonlinearVars::Sigmoid {
                a: tape.row(a),
                v: tape.leaf(v.concat(), v.len(), r).expect("validated shape"),
                c: tape.row(c),
            },
            Nonlinearity::Network { net } => NonlinearVars::Network(net.record(tape)),
        };
        MappingVars {
            theta: tape.row(&self.theta),
            offset: tape.scalar(self.offset),
            means: self.means.clone(),
            linear_only: matches!(self.nonlinear, Nonlinearity::None),
            nonlinear,
        }
    }
}

enum NonlinearVars<'t> {
    None,
    Sigmoid { a: Var<'t>, v: Var<'t>, c: Var<'t> },
    Network(MlpVars<'t>),
}

/// A mapping recorded on a tape.
pub struct MappingVars<'t> {
    theta: Var<'t>,
    offset: Var<'t>,
    means: Vec<f64>,
    linear_only: bool,
    nonlinear: NonlinearVars<'t>,
}

impl<'t> MappingVars<'t> {
    /// Leaves in [`MappingFcn::params`] order.
    pub fn leaves(&self) -> Vec<Var<'t>> {
        let mut v = vec![self.theta, self.offset];
        match &self.nonlinear {
            NonlinearVars::None => {}
            NonlinearVars::Sigmoid { a, v: w, c } => v.extend([*a, *w, *c]),
            NonlinearVars::Network(n) => v.extend(n.leaves()),
        }
        v
    }

    /// `batch x 1` outputs for `batch x R` scaled regressors.
    pub fn forward(&self, r: Var<'t>) -> Result<Var<'t>> {
        let tape = r.tape();
        let centered = if self.linear_only {
            r
        } else {
            let neg: Vec<f64> = self.means.iter().map(|m| -m).collect();
            r.add_row(tape.row(&neg))?
        };
        let mut out = centered.matmul_t(self.theta)?.add_row(self.offset)?;
        match &self.nonlinear {
            NonlinearVars::None => {}
            NonlinearVars::Sigmoid { a, v, c } => {
                let h = centered.matmul_t(*v)?.add_row(*c)?.sigmoid();
                out = out.add(h.matmul_t(*a)?)?;
            }
            NonlinearVars::Network(n) => out = out.add(n.forward(centered)?)?,
        }
        Ok(out)
    }
}

/// Z-score statistics of the regressors and the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressorNormalization {
    pub method: NormalizationMethod,
    pub regressors: ChannelScaling,
    pub output: ChannelScaling,
}

impl RegressorNormalization {
    pub fn identity(r: usize) -> Self {
        Self {
            method: NormalizationMethod::None,
            regressors: ChannelScaling::identity(r),
            output: ChannelScaling::identity(1),
        }
    }
}

/// Like [`ChannelScaling::fit`], but constant columns keep unit scale.
fn tolerant_scaling(m: &DMatrix<f64>) -> ChannelScaling {
    let n = m.nrows() as f64;
    let mut s = ChannelScaling::identity(m.ncols());
    for (j, col) in m.column_iter().enumerate() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        s.mean[j] = mean;
        let sd = var.sqrt();
        if sd > 1e-12 * mean.abs().max(1e-300) && sd > 0.0 {
            s.std[j] = sd;
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NlarxModel {
    output_name: String,
    input_names: Vec<String>,
    ts: f64,
    regressors: Vec<RegressorSpec>,
    regressor_names: Vec<String>,
    mapping: MappingFcn,
    normalization: RegressorNormalization,
    active: Vec<bool>,
    /// set once the scaling statistics and mapping centers have been fitted
    estimated: bool,
}

/// Measured signals of one record, bound to a model's channel order.
#[derive(Debug, Clone)]
struct Signals {
    inputs: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Signals {
    fn len(&self) -> usize {
        self.output.len()
    }

    fn value(&self, l: Lagged, t: usize, output: &[f64]) -> f64 {
        match l.channel {
            Channel::Input(c) => self.inputs[c][t - l.lag],
            Channel::Output(_) => output[t - l.lag],
        }
    }
}

impl NlarxModel {
    /// Single-output model whose regressors read `output` and `inputs`.
    pub fn new(
        output: &str,
        inputs: &[String],
        ts: f64,
        specs: Vec<RegressorSpec>,
        mapping: &MappingSpec,
        seed: u64,
    ) -> Result<Self> {
        if !(ts > 0.0 && ts.is_finite()) {
            return Err(Error::InvalidArgument(format!("sample time {ts} must be positive")));
        }
        let outputs = [output.to_string()];
        let regs = regressors::expand(
            &specs,
            &Variables {
                inputs,
                outputs: &outputs,
            },
        )?;
        if regs.is_empty() {
            return Err(Error::InvalidArgument("a model needs at least one regressor".into()));
        }
        let r = regs.len();
        Ok(Self {
            output_name: output.to_string(),
            input_names: inputs.to_vec(),
            ts,
            regressors: specs,
            regressor_names: regs.into_iter().map(|g| g.name).collect(),
            mapping: MappingFcn::new(mapping, r, seed)?,
            normalization: RegressorNormalization::identity(r),
            active: vec![true; r],
            estimated: false,
        })
    }

    pub fn output_name(&self) -> &str {
        &self.output_name
    }

    pub fn input_names(&self) -> &[String] {
        &self.input_names
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn specs(&self) -> &[RegressorSpec] {
        &self.regressors
    }

    pub fn regressor_names(&self) -> &[String] {
        &self.regressor_names
    }

    pub fn mapping(&self) -> &MappingFcn {
        &self.mapping
    }

    pub fn normalization(&self) -> &RegressorNormalization {
        &self.normalization
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    pub fn active_regressors(&self) -> Vec<String> {
        self.regressor_names
            .iter()
            .zip(&self.active)
            .filter(|(_, &a)| a)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn set_mapping(&mut self, mapping: MappingFcn) -> Result<()> {
        if mapping.num_regressors() != self.regressor_names.len() {
            return Err(Error::DimensionMismatch("mapping regressor count".into()));
        }
        mapping.validate()?;
        self.mapping = mapping;
        self.enforce_mask();
        Ok(())
    }

    pub fn set_normalization(&mut self, n: RegressorNormalization) -> Result<()> {
        if n.regressors.len() != self.regressor_names.len() || n.output.len() != 1 {
            return Err(Error::DimensionMismatch("normalization channel counts".into()));
        }
        self.normalization = n;
        self.estimated = true;
        Ok(())
    }

    /// Deactivates regressors; their parameter groups are zeroed.
    pub fn set_active_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.regressor_names.len() {
            return Err(Error::DimensionMismatch("active mask length".into()));
        }
        self.active = mask;
        self.enforce_mask();
        Ok(())
    }

    fn enforce_mask(&mut self) {
        let mut p = self.mapping.params();
        for (g, &a) in self.mapping.groups().iter().zip(&self.active) {
            if !a {
                g.iter().for_each(|&i| p[i] = 0.0);
            }
        }
        self.mapping.set_params(&p).expect("same length");
    }

    /// Checks structural invariants (used after deserialization).
    pub fn validate(&self) -> Result<()> {
        let regs = self.expand()?;
        let names: Vec<&String> = regs.iter().map(|r| &r.name).collect();
        if names != self.regressor_names.iter().collect::<Vec<_>>() {
            return Err(Error::Document("regressor names disagree with the specs".into()));
        }
        let r = regs.len();
        if self.active.len() != r || self.mapping.num_regressors() != r {
            return Err(Error::Document("regressor counts disagree".into()));
        }
        self.mapping.validate()?;
        if self.normalization.regressors.len() != r || self.normalization.output.len() != 1 {
            return Err(Error::Document("normalization channel counts".into()));
        }
        let p = self.mapping.params();
        for (g, &a) in self.mapping.groups().iter().zip(&self.active) {
            if !a && g.iter().any(|&i| p[i] != 0.0) {
                return Err(Error::Document("inactive regressor with nonzero parameters".into()));
            }
        }
        Ok(())
    }

    pub fn expand(&self) -> Result<Vec<Regressor>> {
        let outputs = [self.output_name.clone()];
        regressors::expand(
            &self.regressors,
            &Variables {
                inputs: &self.input_names,
                outputs: &outputs,
            },
        )
    }

    /// Largest lag, i.e. the length of the initial window.
    pub fn max_lag(&self) -> Result<usize> {
        Ok(regressors::max_lag(&self.expand()?))
    }

    fn bind(&self, data: &SignalTable) -> Result<Signals> {
        let inputs = self
            .input_names
            .iter()
            .map(|n| data.channel(n).ok_or_else(|| Error::MissingColumn(n.clone())))
            .collect::<Result<Vec<_>>>()?;
        let output = data
            .channel(&self.output_name)
            .ok_or_else(|| Error::MissingColumn(self.output_name.clone()))?;
        Ok(Signals { inputs, output })
    }

    fn scaled_row(&self, regs: &[Regressor], sig: &Signals, t: usize, output: &[f64], row: &mut [f64]) {
        let s = &self.normalization.regressors;
        for (j, r) in regs.iter().enumerate() {
            row[j] = if self.active[j] {
                s.forward(j, r.eval(|l| sig.value(l, t, output)))
            } else {
                0.0
            };
        }
    }

    fn run(&self, sig: &Signals, feedback: bool, segment: Option<usize>) -> Result<Vec<f64>> {
        let regs = self.expand()?;
        let l = regressors::max_lag(&regs);
        let n = sig.len();
        if n <= l {
            return Err(Error::InvalidArgument(format!(
                "{n} samples cannot cover a lag window of {l}"
            )));
        }
        let mut y = sig.output.clone();
        let mut row = vec![0.0; regs.len()];
        let mut out = Vec::with_capacity(n - l);
        for t in l..n {
            let past = if feedback { &y } else { &sig.output };
            self.scaled_row(&regs, sig, t, past, &mut row);
            let v = self.normalization.output.inverse(0, self.mapping.eval(&row)?);
            if !v.is_finite() {
                return Err(Error::Divergence { step: t, segment });
            }
            y[t] = v;
            out.push(v);
        }
        Ok(out)
    }

    /// One-step-ahead predictions for `t = L..N` from measured regressors.
    pub fn predict_one_step(&self, data: &SignalTable) -> Result<Vec<f64>> {
        self.run(&self.bind(data)?, false, None)
    }

    /// Free-run outputs for `t = L..N`; the first `L` measured outputs seed
    /// the recursion.
    pub fn simulate(&self, data: &SignalTable) -> Result<Vec<f64>> {
        self.run(&self.bind(data)?, true, None)
    }

    /// Fit percent of [`NlarxModel::simulate`] (or of the one-step predictor)
    /// against the measured output over `t = L..N`.
    pub fn fit(&self, data: &SignalTable, focus: Focus) -> Result<f64> {
        let sig = self.bind(data)?;
        let yhat = self.run(&sig, focus == Focus::Simulation, None)?;
        let l = sig.len() - yhat.len();
        let meas = DMatrix::from_column_slice(yhat.len(), 1, &sig.output[l..]);
        let model = DMatrix::from_column_slice(yhat.len(), 1, &yhat);
        Ok(fit_percent(&meas, &model)?[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Focus {
    #[default]
    Prediction,
    Simulation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    #[default]
    Lm,
    /// the solver configured in the training options
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NlarxTrainingOptions {
    pub focus: Focus,
    pub search: SearchMethod,
    pub lm: LmOptions,
    pub training: TrainingOptions,
    pub normalization: NormalizationMethod,
    /// Start from the least-squares fit of the linear term.
    pub linear_init: bool,
}

impl Default for NlarxTrainingOptions {
    fn default() -> Self {
        Self {
            focus: Focus::Prediction,
            search: SearchMethod::Lm,
            lm: LmOptions::default(),
            training: TrainingOptions::default(),
            normalization: NormalizationMethod::Zscore,
            linear_init: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NlarxReport {
    /// Cost after each accepted step (LM) or epoch.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    /// Fit of the focus-matching predictor on the training data.
    pub fit_percent: f64,
}

struct SimBatch {
    first_segment: usize,
    signals: Vec<Signals>,
}

enum Prepared {
    Prediction {
        /// scaled regressors, inactive columns zero
        x: DMatrix<f64>,
        /// scaled targets
        y: Vec<f64>,
    },
    Simulation {
        batches: Vec<SimBatch>,
        lag: usize,
    },
}

/// Training residuals of an NLARX model; parameters follow
/// [`MappingFcn::params`], restricted to the free (active) entries.
pub struct NlarxObjective {
    model: NlarxModel,
    regs: Vec<Regressor>,
    prepared: Prepared,
    free: Vec<usize>,
}

impl NlarxObjective {
    /// `model` must already hold its scaling statistics.
    pub fn new(model: &NlarxModel, data: &[SignalTable], focus: Focus) -> Result<Self> {
        let regs = model.expand()?;
        let lag = regressors::max_lag(&regs);
        let signals = data.iter().map(|d| model.bind(d)).collect::<Result<Vec<_>>>()?;
        if signals.is_empty() {
            return Err(Error::InvalidArgument("no training data".into()));
        }
        for s in &signals {
            if s.len() <= lag {
                return Err(Error::InvalidArgument(format!(
                    "segment of {} samples cannot cover a lag window of {lag}",
                    s.len()
                )));
            }
        }
        let prepared = match focus {
            Focus::Prediction => {
                let rows: usize = signals.iter().map(|s| s.len() - lag).sum();
                let mut x = DMatrix::zeros(rows, regs.len());
                let mut y = Vec::with_capacity(rows);
                let mut row = vec![0.0; regs.len()];
                let mut k = 0;
                for s in &signals {
                    for t in lag..s.len() {
                        model.scaled_row(&regs, s, t, &s.output, &mut row);
                        x.row_mut(k).copy_from_slice(&row);
                        y.push(model.normalization.output.forward(0, s.output[t]));
                        k += 1;
                    }
                }
                Prepared::Prediction { x, y }
            }
            Focus::Simulation => {
                let mut batches: Vec<SimBatch> = Vec::new();
                for (i, s) in signals.into_iter().enumerate() {
                    match batches.last_mut() {
                        Some(b) if b.signals[0].len() == s.len() => b.signals.push(s),
                        _ => batches.push(SimBatch {
                            first_segment: i,
                            signals: vec![s],
                        }),
                    }
                }
                Prepared::Simulation { batches, lag }
            }
        };
        let mut free = Vec::new();
        let groups = model.mapping.groups();
        let mut masked = vec![false; model.mapping.param_count()];
        for (g, &a) in groups.iter().zip(&model.active) {
            if !a {
                g.iter().for_each(|&i| masked[i] = true);
            }
        }
        free.extend((0..masked.len()).filter(|&i| !masked[i]));
        Ok(Self {
            model: model.clone(),
            regs,
            prepared,
            free,
        })
    }

    pub fn num_free(&self) -> usize {
        self.free.len()
    }

    /// Current free parameters of the template model.
    pub fn initial(&self) -> Vec<f64> {
        let p = self.model.mapping.params();
        self.free.iter().map(|&i| p[i]).collect()
    }

    fn mapping_with(&self, free: &[f64]) -> Result<MappingFcn> {
        if free.len() != self.free.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} free parameters expected, got {}",
                self.free.len(),
                free.len()
            )));
        }
        let mut p = self.model.mapping.params();
        for (&i, &v) in self.free.iter().zip(free) {
            p[i] = v;
        }
        let mut m = self.model.mapping.clone();
        m.set_params(&p)?;
        Ok(m)
    }

    /// Model carrying the given free parameters.
    pub fn model_with(&self, free: &[f64]) -> Result<NlarxModel> {
        let mut m = self.model.clone();
        m.mapping = self.mapping_with(free)?;
        Ok(m)
    }

    /// Records the scaled residuals on `tape`, one matrix per batch.
    fn record<'t>(&self, tape: &'t Tape, mapping: &MappingFcn) -> Result<(Vec<Var<'t>>, Vec<Var<'t>>)> {
        let vars = mapping.record(tape);
        let leaves = vars.leaves();
        let parts = match &self.prepared {
            Prepared::Prediction { x, y } => {
                let out = vars.forward(tape.matrix(x))?;
                vec![out.sub(tape.leaf(y.clone(), y.len(), 1)?)?]
            }
            Prepared::Simulation { batches, lag } => batches
                .iter()
                .map(|b| tape.concat(&self.record_rollout(tape, &vars, b, *lag)?))
                .collect::<Result<_>>()?,
        };
        Ok((parts, leaves))
    }

    /// Per-step `batch x 1` scaled residuals of a batched free run.
    fn record_rollout<'t>(
        &self,
        tape: &'t Tape,
        vars: &MappingVars<'t>,
        batch: &SimBatch,
        lag: usize,
    ) -> Result<Vec<Var<'t>>> {
        let m = &self.model;
        let nb = batch.signals.len();
        let n = batch.signals[0].len();
        let rs = &m.normalization.regressors;
        let ys = &m.normalization.output;
        let mut history: Vec<Option<Var<'t>>> = vec![None; n];
        let mut residuals = Vec::with_capacity(n - lag);
        let zero = tape.leaf(vec![0.0; nb], nb, 1)?;
        for t in lag..n {
            let mut cols = Vec::with_capacity(self.regs.len());
            for (j, r) in self.regs.iter().enumerate() {
                if !m.active[j] {
                    cols.push(zero);
                    continue;
                }
                let col = if r.uses_output() {
                    r.record(|l| match l.channel {
                        Channel::Output(_) if t - l.lag >= lag => history[t - l.lag].expect("earlier step"),
                        _ => {
                            let vals = batch.signals.iter().map(|s| s.value(l, t, &s.output)).collect();
                            tape.leaf(vals, nb, 1).expect("column")
                        }
                    })?
                } else {
                    let vals = batch.signals.iter().map(|s| r.eval(|l| s.value(l, t, &s.output))).collect();
                    tape.leaf(vals, nb, 1)?
                };
                cols.push(col.scale(1.0 / rs.std[j]).offset(-rs.mean[j] / rs.std[j]));
            }
            let row = tape.concat(&cols)?;
            let yn = vars.forward(row)?;
            if !yn.all_finite() {
                return Err(Error::Divergence {
                    step: t,
                    segment: Some(batch.first_segment),
                });
            }
            let target: Vec<f64> = batch.signals.iter().map(|s| ys.forward(0, s.output[t])).collect();
            residuals.push(yn.sub(tape.leaf(target, nb, 1)?)?);
            history[t] = Some(yn.scale(ys.std[0]).offset(ys.mean[0]));
        }
        Ok(residuals)
    }

    pub fn residuals(&self, free: &[f64]) -> Result<DVector<f64>> {
        let mapping = self.mapping_with(free)?;
        let tape = Tape::new();
        let (parts, _) = self.record(&tape, &mapping)?;
        Ok(DVector::from_vec(parts.iter().flat_map(|p| p.value()).collect()))
    }

    pub fn jacobian(&self, free: &[f64]) -> Result<DMatrix<f64>> {
        let mapping = self.mapping_with(free)?;
        let tape = Tape::new();
        let (parts, leaves) = self.record(&tape, &mapping)?;
        let blocks = parts
            .iter()
            .map(|&p| Ok(tape.jacobian(p, &leaves)?.select_columns(self.free.iter())))
            .collect::<Result<Vec<_>>>()?;
        let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
        let mut j = DMatrix::zeros(rows, self.free.len());
        let mut k = 0;
        for b in blocks {
            j.rows_mut(k, b.nrows()).copy_from(&b);
            k += b.nrows();
        }
        Ok(j)
    }

    /// `0.5 * sum r^2` and its gradient with respect to the free parameters.
    pub fn sse_and_gradient(&self, free: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mapping = self.mapping_with(free)?;
        let tape = Tape::new();
        let (parts, leaves) = self.record(&tape, &mapping)?;
        let mut loss = parts[0].square().sum();
        for p in &parts[1..] {
            loss = loss.add(p.square().sum())?;
        }
        let loss = loss.scale(0.5);
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFiniteValue("training loss".into()));
        }
        let g = tape.gradient(loss, &leaves)?.concat();
        Ok((value, self.free.iter().map(|&i| g[i]).collect()))
    }

    pub fn num_residuals(&self) -> usize {
        match &self.prepared {
            Prepared::Prediction { y, .. } => y.len(),
            Prepared::Simulation { batches, lag } => batches
                .iter()
                .map(|b| b.signals.len() * (b.signals[0].len() - lag))
                .sum(),
        }
    }

    /// Mean-squared loss and gradient (the first-order training objective).
    pub fn loss_and_gradient(&self, free: &[f64]) -> Result<(f64, Vec<f64>)> {
        let m = self.num_residuals() as f64;
        let (v, g) = self.sse_and_gradient(free)?;
        Ok((2.0 * v / m, g.into_iter().map(|x| 2.0 * x / m).collect()))
    }
}

/// Physical regressors and targets of every segment, stacked.
fn physical_regressors(model: &NlarxModel, data: &[SignalTable]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let regs = model.expand()?;
    let lag = regressors::max_lag(&regs);
    let signals = data.iter().map(|d| model.bind(d)).collect::<Result<Vec<_>>>()?;
    let rows: usize = signals.iter().map(|s| s.len().saturating_sub(lag)).sum();
    let mut x = DMatrix::zeros(rows, regs.len());
    let mut y = DMatrix::zeros(rows, 1);
    let mut k = 0;
    for s in &signals {
        for t in lag..s.len() {
            for (j, r) in regs.iter().enumerate() {
                x[(k, j)] = r.eval(|l| s.value(l, t, &s.output));
            }
            y[(k, 0)] = s.output[t];
            k += 1;
        }
    }
    if rows == 0 {
        return Err(Error::InvalidArgument(format!("no segment covers the lag window of {lag}")));
    }
    Ok((x, y))
}

/// Fits the linear term (with the nonlinear part held fixed) by least squares
/// on the active scaled regressors.
fn linear_least_squares(obj: &NlarxObjective) -> Result<MappingFcn> {
    let m = &obj.model;
    let Prepared::Prediction { x, y } = &obj.prepared else {
        unreachable!("prediction data")
    };
    let active: Vec<usize> = (0..m.active.len()).filter(|&j| m.active[j]).collect();
    let mut target = DVector::from_column_slice(y);
    if !matches!(m.mapping.nonlinear, Nonlinearity::None) {
        let mut lin_free = m.mapping.clone();
        lin_free.theta.iter_mut().for_each(|v| *v = 0.0);
        lin_free.offset = 0.0;
        for k in 0..x.nrows() {
            let row: Vec<f64> = x.row(k).iter().copied().collect();
            target[k] -= lin_free.eval(&row)?;
        }
    }
    let centered = !matches!(m.mapping.nonlinear, Nonlinearity::None);
    let mut a = DMatrix::zeros(x.nrows(), active.len() + 1);
    for (c, &j) in active.iter().enumerate() {
        let mu = if centered { m.mapping.means[j] } else { 0.0 };
        for k in 0..x.nrows() {
            a[(k, c)] = x[(k, j)] - mu;
        }
    }
    a.column_mut(active.len()).fill(1.0);
    let mut names: Vec<String> = active.iter().map(|&j| m.regressor_names[j].clone()).collect();
    names.push("offset".into());
    let sol = least_squares(&a, &target, &names)?;
    let mut mapping = m.mapping.clone();
    mapping.theta.iter_mut().for_each(|v| *v = 0.0);
    for (c, &j) in active.iter().enumerate() {
        mapping.theta[j] = sol[c];
    }
    mapping.offset = sol[active.len()];
    Ok(mapping)
}

struct ObjectiveProblem<'a>(&'a NlarxObjective);

impl LeastSquaresProblem for ObjectiveProblem<'_> {
    fn residuals(&mut self, x: &[f64]) -> Result<DVector<f64>> {
        self.0.residuals(x)
    }

    fn jacobian(&mut self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.0.jacobian(x)
    }
}

/// Estimates the mapping parameters of `model` on `data` (one table or a
/// list of segments).
pub fn train_nlarx(
    model: &NlarxModel,
    data: &[SignalTable],
    opts: &NlarxTrainingOptions,
) -> Result<(NlarxModel, NlarxReport)> {
    opts.training.validate()?;
    let mut model = model.clone();
    if !model.estimated {
        let (x, y) = physical_regressors(&model, data)?;
        if opts.normalization == NormalizationMethod::Zscore {
            model.normalization = RegressorNormalization {
                method: NormalizationMethod::Zscore,
                regressors: tolerant_scaling(&x),
                output: tolerant_scaling(&y),
            };
        }
        if !matches!(model.mapping.nonlinear, Nonlinearity::None) {
            let scaled = model.normalization.regressors.apply(&x);
            model.mapping.means = scaled.column_iter().map(|c| c.mean()).collect();
        }
        model.estimated = true;
    }
    let mut report = NlarxReport::default();
    let linear = matches!(model.mapping.nonlinear, Nonlinearity::None);
    if opts.linear_init || (linear && opts.focus == Focus::Prediction) {
        let obj = NlarxObjective::new(&model, data, Focus::Prediction)?;
        model.mapping = linear_least_squares(&obj)?;
        model.enforce_mask();
    }
    let closed_form = linear && opts.focus == Focus::Prediction;
    if !closed_form {
        let obj = NlarxObjective::new(&model, data, opts.focus)?;
        let x0 = obj.initial();
        let x = match opts.search {
            SearchMethod::Lm => {
                let rep = minimize_lm(&mut ObjectiveProblem(&obj), &x0, &opts.lm)?;
                report.cost_trace = rep.cost_trace;
                report.iterations = rep.iterations;
                rep.x
            }
            SearchMethod::Gradient => gradient_search(&obj, x0, &opts.training, &mut report)?,
        };
        model = obj.model_with(&x)?;
    }
    let mut fits = Vec::new();
    let mut meas = Vec::new();
    for d in data {
        let sig = model.bind(d)?;
        let yhat = model.run(&sig, opts.focus == Focus::Simulation, None)?;
        meas.extend_from_slice(&sig.output[sig.len() - yhat.len()..]);
        fits.extend(yhat);
    }
    report.fit_percent = fit_percent(
        &DMatrix::from_column_slice(meas.len(), 1, &meas),
        &DMatrix::from_column_slice(fits.len(), 1, &fits),
    )?[0];
    Ok((model, report))
}

fn gradient_search(
    obj: &NlarxObjective,
    mut x: Vec<f64>,
    opts: &TrainingOptions,
    report: &mut NlarxReport,
) -> Result<Vec<f64>> {
    let diverged = |epoch: usize, e: Error| match e {
        Error::Divergence { segment, .. } => Error::TrainingDivergence {
            epoch,
            segment: segment.unwrap_or(0),
        },
        other => other,
    };
    if opts.solver == Solver::Lbfgs {
        let mut lbfgs = Lbfgs::new(opts.lbfgs_memory)?;
        let (mut fx, mut g) = obj.loss_and_gradient(&x).map_err(|e| diverged(0, e))?;
        report.cost_trace.push(fx);
        for epoch in 1..=opts.max_epochs {
            let mut f = |p: &[f64]| match obj.loss_and_gradient(p) {
                Err(Error::Divergence { .. }) | Err(Error::NonFiniteValue(_)) => {
                    Ok((f64::INFINITY, vec![0.0; p.len()]))
                }
                other => other,
            };
            match lbfgs.step(&mut x, &mut fx, &mut g, &mut f) {
                Ok(()) => {}
                Err(Error::LineSearchStall { .. }) => break,
                Err(e) => return Err(diverged(epoch, e)),
            }
            report.cost_trace.push(fx);
            report.iterations = epoch;
        }
    } else {
        let mut state = FirstOrderState::new(opts.solver, x.len())?;
        for epoch in 1..=opts.max_epochs {
            let (l, g) = obj.loss_and_gradient(&x).map_err(|e| diverged(epoch, e))?;
            report.cost_trace.push(l);
            optim::step_first_order(&mut state, &mut x, &g, opts)?;
            report.iterations = epoch;
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityMeasure {
    L1,
    #[default]
    L0,
    LogSum,
}

/// Default `epsilon` of the log-sum reweighting.
pub const DEFAULT_LOG_SUM_EPSILON: f64 = 1e-3;

/// Group proximity operator applied to every group of `v`.
///
/// For a group with norm `s` and weight `w`:
/// * `l1`: scale by `max(0, 1 - lambda step w / s)` (`w` defaults to 1)
/// * `l0`: zero the group iff `s <= sqrt(2 lambda step)`
/// * `log_sum`: the `l1` rule with `w = 1 / (s_prev + eps)`; without
///   explicit weights `s_prev` is the group's own norm and `eps` is
///   [`DEFAULT_LOG_SUM_EPSILON`]
pub fn prox(
    v: &[Vec<f64>],
    measure: SparsityMeasure,
    lambda: f64,
    step: f64,
    weights: Option<&[f64]>,
) -> Vec<Vec<f64>> {
    v.iter()
        .enumerate()
        .map(|(i, g)| {
            let s = optim::norm(g);
            let w = match (weights, measure) {
                (Some(w), _) => w[i],
                (None, SparsityMeasure::LogSum) => 1.0 / (s + DEFAULT_LOG_SUM_EPSILON),
                (None, _) => 1.0,
            };
            let factor = match measure {
                _ if lambda == 0.0 => 1.0,
                SparsityMeasure::L0 => {
                    if s <= (2.0 * lambda * step).sqrt() {
                        0.0
                    } else {
                        1.0
                    }
                }
                SparsityMeasure::L1 | SparsityMeasure::LogSum => {
                    if s == 0.0 {
                        0.0
                    } else {
                        (1.0 - lambda * step * w / s).max(0.0)
                    }
                }
            };
            g.iter().map(|x| x * factor).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparsificationOptions {
    pub sparsity_measure: SparsityMeasure,
    pub lambda: f64,
    /// proximal-gradient iterations (per reweighting round for log-sum)
    pub max_outer_iter: usize,
    /// reweighting rounds of the log-sum measure
    pub reweight_iter: usize,
    /// fixed step; automatic when absent
    pub step: Option<f64>,
    pub log_sum_epsilon: f64,
    pub zero_tolerance: f64,
    /// stop when `|dx| <= tol (|x| + tol)`
    pub tol: f64,
}

impl Default for SparsificationOptions {
    fn default() -> Self {
        Self {
            sparsity_measure: SparsityMeasure::L0,
            lambda: 0.1,
            max_outer_iter: 500,
            reweight_iter: 5,
            step: None,
            log_sum_epsilon: DEFAULT_LOG_SUM_EPSILON,
            zero_tolerance: 1e-8,
            tol: 1e-12,
        }
    }
}

impl SparsificationOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument("lambda must be nonnegative".into()));
        }
        if !(self.log_sum_epsilon > 0.0) {
            return Err(Error::InvalidArgument("log_sum_epsilon must be positive".into()));
        }
        if let Some(s) = self.step {
            if !(s > 0.0) {
                return Err(Error::InvalidArgument("step must be positive".into()));
            }
        }
        if !(self.zero_tolerance >= 0.0) {
            return Err(Error::InvalidArgument("zero_tolerance must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorStatus {
    pub name: String,
    pub group_norm: f64,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsificationReport {
    pub lambda: f64,
    pub regressors: Vec<RegressorStatus>,
    pub iterations: usize,
}

impl SparsificationReport {
    pub fn active(&self) -> Vec<String> {
        self.regressors.iter().filter(|r| r.active).map(|r| r.name.clone()).collect()
    }

    /// CSV with columns `regressor,group_norm,active,lambda`.
    pub fn write_csv(&self, w: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "regressor,group_norm,active,lambda")?;
        for r in &self.regressors {
            writeln!(
                w,
                "{},{},{},{}",
                r.name,
                crate::fmt_num(r.group_norm),
                r.active,
                crate::fmt_num(self.lambda)
            )?;
        }
        Ok(())
    }
}

/// Largest eigenvalue of `a^T a` for `a = [x 1]` by power iteration.
fn lipschitz(x: &DMatrix<f64>) -> f64 {
    let n = x.ncols() + 1;
    let mut a = DMatrix::zeros(x.nrows(), n);
    a.columns_mut(0, x.ncols()).copy_from(x);
    a.column_mut(x.ncols()).fill(1.0);
    let h = a.tr_mul(&a);
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut est = 0.0;
    for _ in 0..500 {
        let w = &h * &v;
        let nw = w.norm();
        if nw == 0.0 {
            return 1.0;
        }
        let next = w / nw;
        let converged = (nw - est).abs() <= 1e-12 * nw;
        est = nw;
        v = next;
        if converged {
            break;
        }
    }
    // power iteration approaches from below
    est * 1.01
}

/// Proximal-gradient regressor selection on a trained model, followed by a
/// re-fit on the surviving regressors with `train_opts`.
pub fn sparsify(
    model: &NlarxModel,
    data: &[SignalTable],
    opts: &SparsificationOptions,
    train_opts: &NlarxTrainingOptions,
) -> Result<(NlarxModel, SparsificationReport)> {
    opts.validate()?;
    if !model.estimated {
        return Err(Error::InvalidArgument("sparsify needs a trained model".into()));
    }
    let obj = NlarxObjective::new(model, data, train_opts.focus)?;
    let groups_full = model.mapping.groups();
    let pos: std::collections::HashMap<usize, usize> =
        obj.free.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let groups: Vec<Vec<usize>> = groups_full
        .iter()
        .map(|g| g.iter().filter_map(|i| pos.get(i).copied()).collect())
        .collect();
    let linear_prediction =
        matches!(model.mapping.nonlinear, Nonlinearity::None) && train_opts.focus == Focus::Prediction;
    let fixed_step = match (opts.step, &obj.prepared) {
        (Some(s), _) => Some(s),
        (None, Prepared::Prediction { x, .. }) if linear_prediction => Some(1.0 / lipschitz(x)),
        _ => None,
    };
    let group_norms = |x: &[f64]| -> Vec<f64> {
        groups
            .iter()
            .map(|g| g.iter().map(|&i| x[i] * x[i]).sum::<f64>().sqrt())
            .collect()
    };
    let apply_prox = |v: &mut Vec<f64>, step: f64, weights: Option<&[f64]>| {
        let gv: Vec<Vec<f64>> = groups.iter().map(|g| g.iter().map(|&i| v[i]).collect()).collect();
        let shrunk = prox(&gv, opts.sparsity_measure, opts.lambda, step, weights);
        for (g, s) in groups.iter().zip(shrunk) {
            for (&i, val) in g.iter().zip(s) {
                v[i] = val;
            }
        }
    };

    let mut x = obj.initial();
    let mut iterations = 0;
    let rounds = if opts.sparsity_measure == SparsityMeasure::LogSum {
        opts.reweight_iter.max(1)
    } else {
        1
    };
    let mut step = fixed_step.unwrap_or(1.0);
    for _ in 0..rounds {
        let weights: Option<Vec<f64>> = (opts.sparsity_measure == SparsityMeasure::LogSum)
            .then(|| group_norms(&x).iter().map(|s| 1.0 / (s + opts.log_sum_epsilon)).collect());
        for _ in 0..opts.max_outer_iter {
            iterations += 1;
            let (fx, g) = obj.sse_and_gradient(&x)?;
            let next = loop {
                let mut v: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - step * b).collect();
                apply_prox(&mut v, step, weights.as_deref());
                if fixed_step.is_some() {
                    break v;
                }
                // backtracking on the quadratic upper bound
                let d: Vec<f64> = v.iter().zip(&x).map(|(a, b)| a - b).collect();
                let bound = fx + optim::dot(&g, &d) + optim::dot(&d, &d) / (2.0 * step);
                let fv = match obj.sse_and_gradient(&v) {
                    Ok((f, _)) => f,
                    Err(Error::Divergence { .. }) | Err(Error::NonFiniteValue(_)) => f64::INFINITY,
                    Err(e) => return Err(e),
                };
                if fv <= bound * (1.0 + 1e-12) + 1e-300 {
                    break v;
                }
                step *= 0.5;
                if step < 1e-300 {
                    break x.clone();
                }
            };
            let dx: f64 = next.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let xn = optim::norm(&next);
            x = next;
            if fixed_step.is_none() {
                step *= 2.0;
            }
            if dx <= opts.tol * (xn + opts.tol) {
                break;
            }
        }
    }
    let norms = group_norms(&x);
    let mut mask = model.active.clone();
    for (j, s) in norms.iter().enumerate() {
        if *s <= opts.zero_tolerance {
            mask[j] = false;
        }
    }
    if !mask.iter().any(|&a| a) {
        return Err(Error::AllRegressorsEliminated { lambda: opts.lambda });
    }
    let mut reduced = obj.model_with(&x)?;
    reduced.set_active_mask(mask.clone())?;
    let (refit, _) = train_nlarx(&reduced, data, train_opts)?;
    let report = SparsificationReport {
        lambda: opts.lambda,
        regressors: model
            .regressor_names
            .iter()
            .zip(&norms)
            .zip(&mask)
            .map(|((n, &s), &a)| RegressorStatus {
                name: n.clone(),
                group_norm: s,
                active: a,
            })
            .collect(),
        iterations,
    };
    Ok((refit, report))
}
