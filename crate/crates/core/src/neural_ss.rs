//! Neural state-space models.
//!
//! The state equation `dx = f(t, x, u)` is a feed-forward network; `dx` is
//! the next state `x(k+1)` for discrete-time models (`ts > 0`) and the time
//! derivative for continuous-time models (`ts == 0`, integrated with
//! fixed-step RK4). The measured outputs are `y = [x; g(t, x, u)]` where the
//! output network `g` exists only when `ny > nx`.
//!
//! With a latent dimension the dynamics run on `z = Encoder(x)` and states
//! are read back through `Decoder(z)`; the rollout starts from
//! `z(0) = Encoder(x0)`.
//!
//! Networks operate on z-score normalized signals; the statistics are fitted
//! on the training data and stored in the model, so [`NeuralStateSpaceModel::simulate`]
//! works in physical units.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::interp::SampledInput;
use crate::mlp::{create_mlp, Activation, InitSpec, MlpNetwork, MlpVars};
use crate::optim::{self, FirstOrderState, Lbfgs, Solver, TrainingOptions};
use crate::signal_data::{fit_percent, Intersample, NormalizationMethod, NormalizationState, SignalTable};

pub use crate::interp::pchip_interpolate;

/// Construction parameters for [`NeuralStateSpaceModel::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct NssSpec {
    pub nx: usize,
    pub nu: usize,
    pub ny: usize,
    /// seconds; 0 means continuous time
    pub ts: f64,
    pub latent_dim: Option<usize>,
    pub time_invariant: bool,
    pub seed: u64,
}

impl Default for NssSpec {
    fn default() -> Self {
        Self {
            nx: 1,
            nu: 0,
            ny: 1,
            ts: 1.0,
            latent_dim: None,
            time_invariant: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuralStateSpaceModel {
    nx: usize,
    nu: usize,
    ny: usize,
    ts: f64,
    latent_dim: Option<usize>,
    time_invariant: bool,
    state_net: MlpNetwork,
    output_net: Option<MlpNetwork>,
    encoder: Option<MlpNetwork>,
    decoder: Option<MlpNetwork>,
    normalization: NormalizationState,
    input_names: Vec<String>,
    output_names: Vec<String>,
}

/// `create_nss(nx, nu, ny, ts, latent_dim)` with default networks and seed 0.
pub fn create_nss(
    nx: usize,
    nu: usize,
    ny: usize,
    ts: f64,
    latent_dim: Option<usize>,
) -> Result<NeuralStateSpaceModel> {
    NeuralStateSpaceModel::new(&NssSpec {
        nx,
        nu,
        ny,
        ts,
        latent_dim,
        ..NssSpec::default()
    })
}

/// Hidden width of the default encoder and decoder.
pub const DEFAULT_AUTOENCODER_WIDTH: usize = 10;

impl NeuralStateSpaceModel {
    pub fn new(spec: &NssSpec) -> Result<Self> {
        let NssSpec {
            nx,
            nu,
            ny,
            ts,
            latent_dim,
            time_invariant,
            seed,
        } = *spec;
        if nx == 0 {
            return Err(Error::InvalidArgument("a model needs at least one state".into()));
        }
        if ny < nx {
            return Err(Error::InvalidArgument(format!(
                "ny = {ny} < nx = {nx}: every state is a measured output"
            )));
        }
        if !(ts >= 0.0 && ts.is_finite()) {
            return Err(Error::InvalidArgument(format!("sample time {ts} is invalid")));
        }
        if latent_dim == Some(0) {
            return Err(Error::InvalidArgument("latent dimension must be positive".into()));
        }
        let tv = usize::from(!time_invariant);
        let nz = latent_dim.unwrap_or(nx);
        let state_net = MlpNetwork::with_defaults(nz + nu + tv, nz, seed)?;
        let output_net = (ny > nx)
            .then(|| MlpNetwork::with_defaults(nx + nu + tv, ny - nx, seed.wrapping_add(1)))
            .transpose()?;
        let (encoder, decoder) = match latent_dim {
            Some(nd) => {
                let w = [DEFAULT_AUTOENCODER_WIDTH];
                (
                    Some(create_mlp(nx, nd, &w, Activation::Tanh, InitSpec::glorot(seed.wrapping_add(2)))?),
                    Some(create_mlp(nd, nx, &w, Activation::Tanh, InitSpec::glorot(seed.wrapping_add(3)))?),
                )
            }
            None => (None, None),
        };
        Ok(Self {
            nx,
            nu,
            ny,
            ts,
            latent_dim,
            time_invariant,
            state_net,
            output_net,
            encoder,
            decoder,
            normalization: NormalizationState::identity(nu, ny),
            input_names: (1..=nu).map(|i| format!("u{i}")).collect(),
            output_names: (1..=ny).map(|i| format!("y{i}")).collect(),
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn nu(&self) -> usize {
        self.nu
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn is_continuous(&self) -> bool {
        self.ts == 0.0
    }

    pub fn latent_dim(&self) -> Option<usize> {
        self.latent_dim
    }

    pub fn time_invariant(&self) -> bool {
        self.time_invariant
    }

    pub fn state_net(&self) -> &MlpNetwork {
        &self.state_net
    }

    pub fn output_net(&self) -> Option<&MlpNetwork> {
        self.output_net.as_ref()
    }

    pub fn encoder(&self) -> Option<&MlpNetwork> {
        self.encoder.as_ref()
    }

    pub fn decoder(&self) -> Option<&MlpNetwork> {
        self.decoder.as_ref()
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

    fn dynamic_dim(&self) -> usize {
        self.latent_dim.unwrap_or(self.nx)
    }

    fn extra_inputs(&self) -> usize {
        self.nu + usize::from(!self.time_invariant)
    }

    pub fn set_state_net(&mut self, net: MlpNetwork) -> Result<()> {
        let nz = self.dynamic_dim();
        check_net("state network", &net, nz + self.extra_inputs(), nz)?;
        self.state_net = net;
        Ok(())
    }

    pub fn set_output_net(&mut self, net: MlpNetwork) -> Result<()> {
        if self.ny == self.nx {
            return Err(Error::InvalidArgument("model has no output network (ny == nx)".into()));
        }
        check_net("output network", &net, self.nx + self.extra_inputs(), self.ny - self.nx)?;
        self.output_net = Some(net);
        Ok(())
    }

    pub fn set_encoder(&mut self, net: MlpNetwork) -> Result<()> {
        let nd = self
            .latent_dim
            .ok_or_else(|| Error::InvalidArgument("model has no latent dimension".into()))?;
        check_net("encoder", &net, self.nx, nd)?;
        self.encoder = Some(net);
        Ok(())
    }

    pub fn set_decoder(&mut self, net: MlpNetwork) -> Result<()> {
        let nd = self
            .latent_dim
            .ok_or_else(|| Error::InvalidArgument("model has no latent dimension".into()))?;
        check_net("decoder", &net, nd, self.nx)?;
        self.decoder = Some(net);
        Ok(())
    }

    pub fn set_normalization(&mut self, n: NormalizationState) -> Result<()> {
        if n.inputs.len() != self.nu || n.outputs.len() != self.ny {
            return Err(Error::DimensionMismatch("normalization channel counts".into()));
        }
        self.normalization = n;
        Ok(())
    }

    pub fn set_channel_names(&mut self, inputs: Vec<String>, outputs: Vec<String>) -> Result<()> {
        if inputs.len() != self.nu || outputs.len() != self.ny {
            return Err(Error::DimensionMismatch("channel name counts".into()));
        }
        self.input_names = inputs;
        self.output_names = outputs;
        Ok(())
    }

    /// Checks the structural invariants (used after deserialization).
    pub fn validate(&self) -> Result<()> {
        let nz = self.dynamic_dim();
        check_net("state network", &self.state_net, nz + self.extra_inputs(), nz)?;
        match (&self.output_net, self.ny > self.nx) {
            (Some(g), true) => check_net("output network", g, self.nx + self.extra_inputs(), self.ny - self.nx)?,
            (None, false) => {}
            _ => return Err(Error::Document("output network presence disagrees with ny > nx".into())),
        }
        match (&self.encoder, &self.decoder, self.latent_dim) {
            (Some(e), Some(d), Some(nd)) => {
                check_net("encoder", e, self.nx, nd)?;
                check_net("decoder", d, nd, self.nx)?;
            }
            (None, None, None) => {}
            _ => {
                return Err(Error::Document(
                    "encoder and decoder must both be present exactly when latent_dim is set".into(),
                ))
            }
        }
        if self.normalization.inputs.len() != self.nu || self.normalization.outputs.len() != self.ny {
            return Err(Error::Document("normalization channel counts".into()));
        }
        Ok(())
    }

    fn nets(&self) -> Vec<&MlpNetwork> {
        let mut v = vec![&self.state_net];
        v.extend(self.output_net.iter());
        v.extend(self.encoder.iter());
        v.extend(self.decoder.iter());
        v
    }

    fn nets_mut(&mut self) -> Vec<&mut MlpNetwork> {
        let mut v = vec![&mut self.state_net];
        v.extend(self.output_net.iter_mut());
        v.extend(self.encoder.iter_mut());
        v.extend(self.decoder.iter_mut());
        v
    }

    pub fn param_count(&self) -> usize {
        self.nets().iter().map(|n| n.param_count()).sum()
    }

    /// State, output, encoder, decoder networks in that order.
    pub fn params(&self) -> Vec<f64> {
        self.nets().iter().flat_map(|n| n.params()).collect()
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
        for net in self.nets_mut() {
            let n = net.param_count();
            net.set_params(&p[off..off + n])?;
            off += n;
        }
        Ok(())
    }

    pub fn record<'t>(&self, tape: &'t Tape) -> ModelVars<'t> {
        ModelVars {
            state: self.state_net.record(tape),
            output: self.output_net.as_ref().map(|n| n.record(tape)),
            encoder: self.encoder.as_ref().map(|n| n.record(tape)),
            decoder: self.decoder.as_ref().map(|n| n.record(tape)),
        }
    }

    fn check_grid(&self, data_ts: f64) -> Result<()> {
        if !self.is_continuous() && (data_ts - self.ts).abs() > 1e-9 * self.ts {
            return Err(Error::InvalidArgument(format!(
                "data sample time {data_ts} differs from the model's {}",
                self.ts
            )));
        }
        Ok(())
    }

    fn substeps(&self, data_ts: f64, ode_step: Option<f64>) -> Result<usize> {
        if !self.is_continuous() {
            return Ok(0);
        }
        let h = ode_step.ok_or_else(|| {
            Error::InvalidArgument("continuous-time models need an ODE step".into())
        })?;
        if !(h > 0.0) || h > data_ts * (1.0 + 1e-12) {
            return Err(Error::InvalidArgument(format!(
                "ODE step {h} must be positive and at most the sample time {data_ts}"
            )));
        }
        Ok(((data_ts / h) - 1e-9).ceil().max(1.0) as usize)
    }

    /// Noise-free rollout from the physical initial state `x0` driven by the
    /// inputs of `data`. Row `k` of the result is sample `k`.
    pub fn simulate(&self, data: &SignalTable, x0: &[f64], ode_step: Option<f64>) -> Result<Simulation> {
        if data.num_inputs() != self.nu {
            return Err(Error::DimensionMismatch(format!(
                "model has {} inputs, data has {}",
                self.nu,
                data.num_inputs()
            )));
        }
        if x0.len() != self.nx || x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("x0 must hold {} finite values", self.nx)));
        }
        self.check_grid(data.sample_time())?;
        let substeps = self.substeps(data.sample_time(), ode_step)?;
        let norm = &self.normalization;
        let x0n: Vec<f64> = x0.iter().enumerate().map(|(i, &v)| norm.outputs.forward(i, v)).collect();
        let drive = Drive::new(
            vec![self.normalized_inputs(data)?],
            data.intersample().to_vec(),
            data.len(),
            data.sample_time(),
            !self.time_invariant,
        )?;
        let tape = Tape::new();
        let vars = self.record(&tape);
        let x0v = tape.leaf(x0n, 1, self.nx)?;
        let outs = self.rollout(&tape, &vars, x0v, &drive, substeps, None)?;
        let n = data.len();
        let mut outputs = DMatrix::zeros(n, self.ny);
        for (k, y) in outs.iter().enumerate() {
            for (j, v) in y.value().into_iter().enumerate() {
                outputs[(k, j)] = norm.outputs.inverse(j, v);
            }
        }
        let states = outputs.columns(0, self.nx).into_owned();
        Ok(Simulation { states, outputs })
    }

    fn normalized_inputs(&self, data: &SignalTable) -> Result<Vec<Vec<f64>>> {
        let u = data.inputs();
        Ok((0..self.nu)
            .map(|c| {
                u.column(c)
                    .iter()
                    .map(|&v| self.normalization.inputs.forward(c, v))
                    .collect()
            })
            .collect())
    }

    fn step_input<'t>(&self, tape: &'t Tape, drive: &Drive, k: usize, s: f64) -> Option<Var<'t>> {
        drive.row(tape, k, s)
    }

    fn net_input<'t>(x: Var<'t>, extra: Option<Var<'t>>) -> Result<Var<'t>> {
        match extra {
            Some(e) => x.tape().concat(&[x, e]),
            None => Ok(x),
        }
    }

    /// Normalized rollout of a batch; returns the `batch x ny` outputs per step.
    fn rollout<'t>(
        &self,
        tape: &'t Tape,
        vars: &ModelVars<'t>,
        x0: Var<'t>,
        drive: &Drive,
        substeps: usize,
        segment: Option<usize>,
    ) -> Result<Vec<Var<'t>>> {
        let mut z = match &vars.encoder {
            Some(e) => e.forward(x0)?,
            None => x0,
        };
        let f = |z: Var<'t>, e: Option<Var<'t>>| -> Result<Var<'t>> { vars.state.forward(Self::net_input(z, e)?) };
        let mut outputs = Vec::with_capacity(drive.steps);
        for k in 0..drive.steps {
            if !z.all_finite() {
                return Err(Error::Divergence { step: k, segment });
            }
            let e = self.step_input(tape, drive, k, 0.0);
            let x = match &vars.decoder {
                Some(d) => d.forward(z)?,
                None => z,
            };
            let y = match &vars.output {
                Some(g) => tape.concat(&[x, g.forward(Self::net_input(x, e)?)?])?,
                None => x,
            };
            outputs.push(y);
            if k + 1 == drive.steps {
                break;
            }
            if substeps == 0 {
                z = f(z, e)?;
            } else {
                let h = drive.ts / substeps as f64;
                for j in 0..substeps {
                    let s0 = j as f64 / substeps as f64;
                    let sm = (j as f64 + 0.5) / substeps as f64;
                    let s1 = (j + 1) as f64 / substeps as f64;
                    let e0 = self.step_input(tape, drive, k, s0);
                    let em = self.step_input(tape, drive, k, sm);
                    let e1 = self.step_input(tape, drive, k, s1);
                    let k1 = f(z, e0)?;
                    let k2 = f(z.add(k1.scale(h / 2.0))?, em)?;
                    let k3 = f(z.add(k2.scale(h / 2.0))?, em)?;
                    let k4 = f(z.add(k3.scale(h))?, e1)?;
                    let incr = k1.add(k2.scale(2.0))?.add(k3.scale(2.0))?.add(k4)?;
                    z = z.add(incr.scale(h / 6.0))?;
                }
            }
        }
        Ok(outputs)
    }

    /// One discrete step `x(k+1) = f(x(k), u(k))` in physical units, recorded
    /// on `tape`; `x` is `1 x nx`.
    pub fn record_transition<'t>(
        &self,
        tape: &'t Tape,
        vars: &ModelVars<'t>,
        x: Var<'t>,
        u: &[f64],
    ) -> Result<Var<'t>> {
        self.check_filterable(u)?;
        let xn = self.record_normalize_state(tape, x)?;
        let e = self.physical_input_row(tape, u);
        let next = vars.state.forward(Self::net_input(xn, e)?)?;
        self.record_denormalize(tape, next, 0, self.nx)
    }

    /// Outputs `[x; g(x, u)]` in physical units, recorded on `tape`.
    pub fn record_measurement<'t>(
        &self,
        tape: &'t Tape,
        vars: &ModelVars<'t>,
        x: Var<'t>,
        u: &[f64],
    ) -> Result<Var<'t>> {
        self.check_filterable(u)?;
        let Some(g) = &vars.output else {
            return Ok(x);
        };
        let xn = self.record_normalize_state(tape, x)?;
        let e = self.physical_input_row(tape, u);
        let extra = g.forward(Self::net_input(xn, e)?)?;
        let extra = self.record_denormalize(tape, extra, self.nx, self.ny - self.nx)?;
        tape.concat(&[x, extra])
    }

    fn check_filterable(&self, u: &[f64]) -> Result<()> {
        if self.is_continuous() || self.latent_dim.is_some() || !self.time_invariant {
            return Err(Error::InvalidArgument(
                "state estimation needs a discrete-time, time-invariant model without latent reduction".into(),
            ));
        }
        if u.len() != self.nu {
            return Err(Error::DimensionMismatch(format!("expected {} inputs", self.nu)));
        }
        Ok(())
    }

    fn record_normalize_state<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let s = &self.normalization.outputs;
        let neg_mean: Vec<f64> = s.mean[..self.nx].iter().map(|m| -m).collect();
        let inv_std: Vec<f64> = s.std[..self.nx].iter().map(|v| 1.0 / v).collect();
        x.add_row(tape.row(&neg_mean))?.mul(tape.row(&inv_std))
    }

    fn record_denormalize<'t>(&self, tape: &'t Tape, v: Var<'t>, first: usize, len: usize) -> Result<Var<'t>> {
        let s = &self.normalization.outputs;
        v.mul(tape.row(&s.std[first..first + len]))?
            .add_row(tape.row(&s.mean[first..first + len]))
    }

    fn physical_input_row<'t>(&self, tape: &'t Tape, u: &[f64]) -> Option<Var<'t>> {
        (self.nu > 0).then(|| {
            let un: Vec<f64> = u
                .iter()
                .enumerate()
                .map(|(c, &v)| self.normalization.inputs.forward(c, v))
                .collect();
            tape.row(&un)
        })
    }
}

fn check_net(what: &str, net: &MlpNetwork, input: usize, output: usize) -> Result<()> {
    if net.input_dim() != input || net.output_dim() != output {
        return Err(Error::DimensionMismatch(format!(
            "{what} must map {input} -> {output}, got {} -> {}",
            net.input_dim(),
            net.output_dim()
        )));
    }
    Ok(())
}

/// Model networks recorded on a tape.
pub struct ModelVars<'t> {
    pub state: MlpVars<'t>,
    pub output: Option<MlpVars<'t>>,
    pub encoder: Option<MlpVars<'t>>,
    pub decoder: Option<MlpVars<'t>>,
}

impl<'t> ModelVars<'t> {
    /// Parameter leaves in [`NeuralStateSpaceModel::params`] order.
    pub fn leaves(&self) -> Vec<Var<'t>> {
        let mut v = self.state.leaves();
        for n in [&self.output, &self.encoder, &self.decoder].into_iter().flatten() {
            v.extend(n.leaves());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    /// `N x nx` (decoded states for latent models)
    pub states: DMatrix<f64>,
    /// `N x ny`
    pub outputs: DMatrix<f64>,
}

/// Normalized input samples of a batch of equal-length segments.
struct Drive {
    inputs: Vec<SampledInput>,
    steps: usize,
    ts: f64,
    time_feature: bool,
}

impl Drive {
    fn new(
        segments: Vec<Vec<Vec<f64>>>,
        rules: Vec<Intersample>,
        steps: usize,
        ts: f64,
        time_feature: bool,
    ) -> Result<Self> {
        let inputs = segments
            .into_iter()
            .map(|s| SampledInput::new(s, rules.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            inputs,
            steps,
            ts,
            time_feature,
        })
    }

    fn batch(&self) -> usize {
        self.inputs.len()
    }

    /// `batch x (nu [+1])` row of network inputs on interval `k` at fraction `s`.
    fn row<'t>(&self, tape: &'t Tape, k: usize, s: f64) -> Option<Var<'t>> {
        let nu = self.inputs.first().map_or(0, SampledInput::channels);
        let width = nu + usize::from(self.time_feature);
        if width == 0 {
            return None;
        }
        let mut vals = Vec::with_capacity(self.batch() * width);
        let mut buf = Vec::with_capacity(nu);
        for inp in &self.inputs {
            inp.at(k, s, &mut buf);
            vals.extend_from_slice(&buf);
            if self.time_feature {
                vals.push((k as f64 + s) / self.steps as f64);
            }
        }
        Some(tape.leaf(vals, self.batch(), width).expect("consistent row width"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub prediction: f64,
    pub reconstruction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            prediction: 1.0,
            reconstruction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NssTrainingOptions {
    pub training: TrainingOptions,
    /// Overrides the intersample rule of every input during training.
    pub input_intersample: Option<Intersample>,
    /// RK4 step for continuous-time models (seconds, at most the sample time).
    pub ode_step: Option<f64>,
    pub loss_weights: LossWeights,
    /// Segments per optimizer step for the first-order solvers.
    pub mini_batch_size: usize,
    pub normalization: NormalizationMethod,
}

impl Default for NssTrainingOptions {
    fn default() -> Self {
        Self {
            training: TrainingOptions::default(),
            input_intersample: None,
            ode_step: None,
            loss_weights: LossWeights::default(),
            mini_batch_size: 1,
            normalization: NormalizationMethod::Zscore,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingReport {
    pub trace: Vec<EpochRecord>,
    /// Per-output fit of the trained model's segment simulations.
    pub fit_percent: Vec<f64>,
    /// LBFGS ended on a line-search stall before `max_epochs`.
    pub stalled: bool,
}

struct Batch {
    first_segment: usize,
    drive: Drive,
    /// `batch x nx`
    x0: Vec<f64>,
    /// per step `batch x ny`
    targets: Vec<Vec<f64>>,
    /// all measured states of the batch, `(batch * steps) x nx`
    states: Vec<f64>,
    samples: usize,
}

/// Training loss over prepared data, exposed for gradient checks.
pub struct NssObjective {
    template: NeuralStateSpaceModel,
    batches: Vec<Batch>,
    substeps: usize,
    opts: NssTrainingOptions,
}

impl NssObjective {
    /// Prepares `data` (physical units) using the normalization already
    /// stored in `model`.
    pub fn new(model: &NeuralStateSpaceModel, data: &[SignalTable], opts: &NssTrainingOptions) -> Result<Self> {
        let first = data
            .first()
            .ok_or_else(|| Error::InvalidArgument("no training data".into()))?;
        let ts = first.sample_time();
        for d in data {
            if d.num_inputs() != model.nu || d.num_outputs() != model.ny {
                return Err(Error::DimensionMismatch(format!(
                    "model is {}-in/{}-out, data is {}-in/{}-out",
                    model.nu,
                    model.ny,
                    d.num_inputs(),
                    d.num_outputs()
                )));
            }
            if (d.sample_time() - ts).abs() > 1e-9 * ts {
                return Err(Error::InvalidArgument("segments have different sample times".into()));
            }
        }
        model.check_grid(ts)?;
        let substeps = model.substeps(ts, opts.ode_step)?;
        let w = opts.loss_weights;
        if !(w.prediction > 0.0) || !(w.reconstruction >= 0.0) {
            return Err(Error::InvalidArgument("loss weights: prediction > 0, reconstruction >= 0".into()));
        }
        if opts.mini_batch_size == 0 {
            return Err(Error::InvalidArgument("mini_batch_size must be at least 1".into()));
        }
        opts.training.validate()?;

        let norm = &model.normalization;
        let mut batches = Vec::new();
        let mut i = 0;
        while i < data.len() {
            let len = data[i].len();
            let mut j = i + 1;
            let limit = if opts.training.solver == Solver::Lbfgs { usize::MAX } else { opts.mini_batch_size };
            while j < data.len() && j - i < limit && data[j].len() == len {
                j += 1;
            }
            let group = &data[i..j];
            let rules = match opts.input_intersample {
                Some(r) => vec![r; model.nu],
                None => group[0].intersample().to_vec(),
            };
            let mut x0 = Vec::new();
            let mut targets = vec![Vec::with_capacity(group.len() * model.ny); len];
            let mut states = Vec::with_capacity(group.len() * len * model.nx);
            let mut inputs = Vec::new();
            for seg in group {
                let yn = norm.outputs.apply(seg.outputs());
                for c in 0..model.nx {
                    x0.push(yn[(0, c)]);
                }
                for (k, t) in targets.iter_mut().enumerate() {
                    t.extend(yn.row(k).iter());
                    states.extend(yn.row(k).iter().take(model.nx));
                }
                inputs.push(model.normalized_inputs(seg)?);
            }
            batches.push(Batch {
                first_segment: i,
                drive: Drive::new(inputs, rules, len, ts, !model.time_invariant)?,
                x0,
                targets,
                states,
                samples: group.len() * len,
            });
            i = j;
        }
        Ok(Self {
            template: model.clone(),
            batches,
            substeps,
            opts: opts.clone(),
        })
    }

    pub fn num_batches(&self) -> usize {
        self.batches.len()
    }

    fn batch_loss(&self, params: &[f64], b: usize, with_grad: bool) -> Result<(f64, Vec<f64>)> {
        let mut model = self.template.clone();
        model.set_params(params)?;
        let batch = &self.batches[b];
        let tape = Tape::new();
        let vars = model.record(&tape);
        let nb = batch.drive.batch();
        let x0 = tape.leaf(batch.x0.clone(), nb, model.nx)?;
        let outs = model.rollout(&tape, &vars, x0, &batch.drive, self.substeps, Some(batch.first_segment))?;
        let loss_fn = self.opts.training.loss;
        let mut acc: Option<Var<'_>> = None;
        for (y, target) in outs.iter().zip(&batch.targets) {
            let t = tape.leaf(target.clone(), nb, model.ny)?;
            let term = loss_fn.record(y.sub(t)?);
            acc = Some(match acc {
                Some(a) => a.add(term)?,
                None => term,
            });
        }
        let steps = outs.len() as f64;
        let mut loss = acc.expect("at least one step").scale(self.opts.loss_weights.prediction / steps);
        if let (Some(e), Some(d)) = (&vars.encoder, &vars.decoder) {
            if self.opts.loss_weights.reconstruction > 0.0 {
                let xs = tape.leaf(batch.states.clone(), batch.samples, model.nx)?;
                let rec = d.forward(e.forward(xs)?)?.sub(xs)?.square().mean();
                loss = loss.add(rec.scale(self.opts.loss_weights.reconstruction))?;
            }
        }
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: batch.drive.steps,
                segment: Some(batch.first_segment),
            });
        }
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.gradient(loss, &vars.leaves())?;
        Ok((value, grads.concat()))
    }

    /// Sample-weighted mean loss and gradient over every batch.
    pub fn loss_and_gradient(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let total: usize = self.batches.iter().map(|b| b.samples).sum();
        let mut loss = 0.0;
        let mut grad = vec![0.0; params.len()];
        for b in 0..self.batches.len() {
            let (l, g) = self.batch_loss(params, b, true)?;
            let w = self.batches[b].samples as f64 / total as f64;
            loss += w * l;
            for (a, gi) in grad.iter_mut().zip(&g) {
                *a += w * gi;
            }
        }
        Ok((loss, grad))
    }

    pub fn loss(&self, params: &[f64]) -> Result<f64> {
        let total: usize = self.batches.iter().map(|b| b.samples).sum();
        let mut loss = 0.0;
        for b in 0..self.batches.len() {
            let (l, _) = self.batch_loss(params, b, false)?;
            loss += self.batches[b].samples as f64 / total as f64 * l;
        }
        Ok(loss)
    }
}

/// Trains every network of `model` on `data` (one table or a list of
/// equal-length segments), minimizing the simulation loss of each segment
/// started from its measured first state.
pub fn train_nss(
    model: &NeuralStateSpaceModel,
    data: &[SignalTable],
    opts: &NssTrainingOptions,
) -> Result<(NeuralStateSpaceModel, TrainingReport)> {
    if opts.training.max_epochs == 0 {
        return Ok((model.clone(), TrainingReport::default()));
    }
    let mut model = model.clone();
    if let Some(first) = data.first() {
        model.set_channel_names(first.input_names().to_vec(), first.output_names().to_vec())?;
    }
    if model.normalization.method == NormalizationMethod::None && opts.normalization != NormalizationMethod::None {
        model.normalization = NormalizationState::fit_many(data, opts.normalization)?;
    }
    let objective = NssObjective::new(&model, data, opts)?;
    let mut params = model.params();
    let mut report = TrainingReport::default();
    let diverged = |epoch: usize, e: Error| match e {
        Error::Divergence { segment, .. } => Error::TrainingDivergence {
            epoch,
            segment: segment.unwrap_or(0),
        },
        other => other,
    };

    if opts.training.solver == Solver::Lbfgs {
        let mut lbfgs = Lbfgs::new(opts.training.lbfgs_memory)?;
        let (mut fx, mut g) = objective.loss_and_gradient(&params).map_err(|e| diverged(0, e))?;
        for epoch in 1..=opts.training.max_epochs {
            let mut f = |p: &[f64]| match objective.loss_and_gradient(p) {
                Err(Error::Divergence { .. }) => Ok((f64::INFINITY, vec![0.0; p.len()])),
                other => other,
            };
            match lbfgs.step(&mut params, &mut fx, &mut g, &mut f) {
                Ok(()) => {}
                Err(Error::LineSearchStall { .. }) => {
                    report.stalled = true;
                    break;
                }
                Err(e) => return Err(diverged(epoch, e)),
            }
            report.trace.push(EpochRecord {
                epoch,
                loss: fx,
                grad_norm: optim::norm(&g),
            });
            if optim::norm(&g) == 0.0 {
                break;
            }
        }
    } else {
        let mut state = FirstOrderState::new(opts.training.solver, params.len())?;
        let total: usize = objective.batches.iter().map(|b| b.samples).sum();
        for epoch in 1..=opts.training.max_epochs {
            let mut epoch_loss = 0.0;
            let mut epoch_grad = vec![0.0; params.len()];
            for b in 0..objective.num_batches() {
                let (l, g) = objective.batch_loss(&params, b, true).map_err(|e| diverged(epoch, e))?;
                let w = objective.batches[b].samples as f64 / total as f64;
                epoch_loss += w * l;
                for (a, gi) in epoch_grad.iter_mut().zip(&g) {
                    *a += w * gi;
                }
                optim::step_first_order(&mut state, &mut params, &g, &opts.training)?;
            }
            report.trace.push(EpochRecord {
                epoch,
                loss: epoch_loss,
                grad_norm: optim::norm(&epoch_grad),
            });
        }
    }
    model.set_params(&params)?;
    report.fit_percent = segment_fit(&model, data, opts)?;
    Ok((model, report))
}

fn segment_fit(model: &NeuralStateSpaceModel, data: &[SignalTable], opts: &NssTrainingOptions) -> Result<Vec<f64>> {
    let n: usize = data.iter().map(SignalTable::len).sum();
    let mut meas = DMatrix::zeros(n, model.ny);
    let mut sim = DMatrix::zeros(n, model.ny);
    let mut r = 0;
    for seg in data {
        let seg = match opts.input_intersample {
            Some(rule) => seg.clone().with_intersample(rule),
            None => seg.clone(),
        };
        let x0: Vec<f64> = seg.outputs().row(0).iter().take(model.nx).copied().collect();
        let s = model.simulate(&seg, &x0, opts.ode_step)?;
        meas.rows_mut(r, seg.len()).copy_from(seg.outputs());
        sim.rows_mut(r, seg.len()).copy_from(&s.outputs);
        r += seg.len();
    }
    fit_percent(&meas, &sim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn affine(w: &[f64], rows: usize, cols: usize, b: &[f64]) -> MlpNetwork {
        MlpNetwork::affine(DMatrix::from_row_slice(rows, cols, w), DVector::from_column_slice(b)).unwrap()
    }

    #[test]
    fn constructor_shapes() {
        let m = create_nss(3, 2, 4, 0.1, None).unwrap();
        let g = m.output_net().unwrap();
        assert_eq!((g.input_dim(), g.output_dim()), (5, 1));
        assert_eq!(m.state_net().layer_sizes(), [64, 64]);

        let engine = create_nss(1, 4, 1, 0.1, None).unwrap();
        assert!(engine.output_net().is_none());

        let ae = create_nss(20, 1, 20, 1.0, Some(7)).unwrap();
        let (e, d) = (ae.encoder().unwrap(), ae.decoder().unwrap());
        assert_eq!((e.input_dim(), e.output_dim()), (20, 7));
        assert_eq!((d.input_dim(), d.output_dim()), (7, 20));
        assert_eq!(ae.state_net().input_dim(), 8);
        assert_eq!(e.layer_sizes(), [DEFAULT_AUTOENCODER_WIDTH]);

        assert!(create_nss(3, 1, 2, 0.1, None).is_err());
    }

    #[test]
    fn time_varying_widens_inputs() {
        let m = NeuralStateSpaceModel::new(&NssSpec {
            nx: 2,
            nu: 1,
            ny: 3,
            time_invariant: false,
            ..NssSpec::default()
        })
        .unwrap();
        assert_eq!(m.state_net().input_dim(), 4);
        assert_eq!(m.output_net().unwrap().input_dim(), 4);
    }

    fn table(u: &[f64], y: &[f64], ts: f64) -> SignalTable {
        SignalTable::from_matrices(
            DMatrix::from_column_slice(u.len(), 1, u),
            DMatrix::from_column_slice(y.len(), 1, y),
            ts,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn zero_state_net_collapses_to_zero() {
        let mut m = create_nss(1, 1, 1, 1.0, None).unwrap();
        m.set_state_net(create_mlp(2, 1, &[4], Activation::Tanh, InitSpec::zeros()).unwrap()).unwrap();
        let d = table(&[1.0; 5], &[0.0; 5], 1.0);
        let s = m.simulate(&d, &[3.0], None).unwrap();
        assert_eq!(s.states.column(0).as_slice(), &[3.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn geometric_series() {
        let mut m = create_nss(1, 1, 1, 1.0, None).unwrap();
        m.set_state_net(affine(&[0.9, 0.1], 1, 2, &[0.0])).unwrap();
        let d = table(&[1.0; 30], &[0.0; 30], 1.0);
        let s = m.simulate(&d, &[0.0], None).unwrap();
        for k in 0..30 {
            assert!((s.states[(k, 0)] - (1.0 - 0.9f64.powi(k as i32))).abs() < 1e-14);
        }
    }

    #[test]
    fn identity_net_holds_state() {
        let mut m = create_nss(2, 0, 2, 1.0, None).unwrap();
        m.set_state_net(MlpNetwork::affine(DMatrix::identity(2, 2), DVector::zeros(2)).unwrap()).unwrap();
        let d = SignalTable::from_matrices(DMatrix::zeros(6, 0), DMatrix::zeros(6, 2), 1.0, 0.0).unwrap();
        let s = m.simulate(&d, &[0.7, -1.3], None).unwrap();
        for k in 0..6 {
            assert_eq!(s.states.row(k).iter().copied().collect::<Vec<_>>(), vec![0.7, -1.3]);
        }
    }

    #[test]
    fn identity_autoencoder_matches_plain_model() {
        let f = affine(&[0.5, 0.2, 0.1, -0.3, 0.8, 0.4], 2, 3, &[0.05, -0.02]);
        let mut plain = create_nss(2, 1, 2, 1.0, None).unwrap();
        plain.set_state_net(f.clone()).unwrap();
        let mut ae = create_nss(2, 1, 2, 1.0, Some(2)).unwrap();
        ae.set_state_net(f).unwrap();
        let id = MlpNetwork::affine(DMatrix::identity(2, 2), DVector::zeros(2)).unwrap();
        ae.set_encoder(id.clone()).unwrap();
        ae.set_decoder(id).unwrap();
        let u: Vec<f64> = (0..20).map(|k| (k as f64 * 0.3).sin()).collect();
        let d = SignalTable::from_matrices(
            DMatrix::from_column_slice(20, 1, &u),
            DMatrix::zeros(20, 2),
            1.0,
            0.0,
        )
        .unwrap();
        let a = plain.simulate(&d, &[0.3, -0.1], None).unwrap();
        let b = ae.simulate(&d, &[0.3, -0.1], None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn continuous_time_needs_valid_step() {
        let m = create_nss(1, 1, 1, 0.0, None).unwrap();
        let d = table(&[0.0; 3], &[0.0; 3], 0.1);
        assert!(m.simulate(&d, &[0.0], None).is_err());
        assert!(m.simulate(&d, &[0.0], Some(0.2)).is_err());
        assert!(m.simulate(&d, &[0.0], Some(0.05)).is_ok());
    }

    #[test]
    fn discrete_grid_mismatch_is_rejected() {
        let m = create_nss(1, 1, 1, 0.1, None).unwrap();
        assert!(m.simulate(&table(&[0.0; 3], &[0.0; 3], 0.2), &[0.0], None).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let mut m = create_nss(1, 0, 1, 1.0, None).unwrap();
        m.set_state_net(affine(&[1e200], 1, 1, &[0.0])).unwrap();
        let d = SignalTable::from_matrices(DMatrix::zeros(10, 0), DMatrix::zeros(10, 1), 1.0, 0.0).unwrap();
        match m.simulate(&d, &[1e200], None) {
            Err(Error::Divergence { step, .. }) => assert_eq!(step, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let m = create_nss(1, 1, 1, 1.0, None).unwrap();
        let d = table(&[1.0, 2.0, 3.0], &[0.5, 0.1, 0.7], 1.0);
        let opts = NssTrainingOptions {
            training: TrainingOptions {
                max_epochs: 0,
                ..TrainingOptions::default()
            },
            ..NssTrainingOptions::default()
        };
        let (trained, report) = train_nss(&m, &[d], &opts).unwrap();
        assert_eq!(trained, m);
        assert!(report.trace.is_empty());
    }

    #[test]
    fn params_round_trip() {
        let mut m = create_nss(3, 2, 4, 0.1, Some(2)).unwrap();
        let p = m.params();
        assert_eq!(p.len(), m.param_count());
        let before = m.clone();
        m.set_params(&p).unwrap();
        assert_eq!(m, before);
        assert!(m.set_params(&p[1..]).is_err());
    }
}
