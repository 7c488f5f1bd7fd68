//! `sysid` command-line front end.
//!
//! Every task reads an optional TOML config (`--config`), applies flag
//! overrides, writes the resolved config to `<output_dir>/resolved_config.toml`
//! and then its artifacts. Failures leave `<output_dir>/error.json` and exit
//! with 2 (config), 3 (data) or 4 (numerical).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::benchgen::{self, BenchOptions};
use crate::document::{load_model, save_model, to_json, Model};
use crate::ekf::{Ekf, LinearModel, StateModel};
use crate::error::{Error, ErrorKind, Result};
use crate::hw::{fit_linear_auto, train_hw, HwModel, HwTrainingOptions, StaticNonlinearity};
use crate::mlp::{create_mlp, Activation, InitSpec};
use crate::neural_ss::{NeuralStateSpaceModel, NssSpec, NssTrainingOptions};
use crate::nlarx::{sparsify, train_nlarx, MappingSpec, NlarxModel, NlarxTrainingOptions, SparsificationOptions};
use crate::regressors::RegressorSpec;
use crate::signal_data::{
    fit_percent, read_csv, segment, CsvSchema, NormalizationMethod, NormalizationState, SignalTable,
};
use crate::{fmt_num, neural_ss};

/// Default output directory when neither the flag nor the config names one.
pub const OUTPUT_DIR_ENV: &str = "SYSID_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "sysid-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    TrainNlss,
    TrainNlarx,
    TrainNlhw,
    Sparsify,
    Compare,
    Simulate,
    Ekf,
    Benchgen,
}

impl Task {
    fn name(self) -> &'static str {
        match self {
            Task::TrainNlss => "train-nlss",
            Task::TrainNlarx => "train-nlarx",
            Task::TrainNlhw => "train-nlhw",
            Task::Sparsify => "sparsify",
            Task::Compare => "compare",
            Task::Simulate => "simulate",
            Task::Ekf => "ekf",
            Task::Benchgen => "benchgen",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CSV table with a header row
    pub estimation: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    /// Input and output column names. When both are empty, columns named
    /// `u<k>` are inputs and `y<k>` are outputs.
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Defaults to `t` when the header has such a column.
    pub time_column: Option<String>,
    pub sample_time: Option<f64>,
    /// Headerless numeric matrices (rows are samples), used instead of the
    /// CSV tables. They need `sample_time`.
    pub input_matrix: Option<PathBuf>,
    pub output_matrix: Option<PathBuf>,
    pub validation_input_matrix: Option<PathBuf>,
    pub validation_output_matrix: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchgenConfig {
    pub system: String,
    pub samples: usize,
    pub options: BenchOptions,
}

impl Default for BenchgenConfig {
    fn default() -> Self {
        Self {
            system: "narx_toy".into(),
            samples: 1000,
            options: BenchOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NlssConfig {
    /// number of states (the first `nx` outputs); all outputs when absent
    pub nx: Option<usize>,
    pub latent_dim: Option<usize>,
    /// continuous-time model integrated with RK4
    pub continuous: bool,
    pub time_invariant: bool,
    /// hidden layers of the state network; the default network when absent
    pub state_layers: Option<Vec<usize>>,
    pub activation: Activation,
    /// split the estimation record into frames of this many samples
    pub segment_length: Option<usize>,
    pub training: NssTrainingOptions,
}

impl Default for NlssConfig {
    fn default() -> Self {
        Self {
            nx: None,
            latent_dim: None,
            continuous: false,
            time_invariant: true,
            state_layers: None,
            activation: Activation::Tanh,
            segment_length: None,
            training: NssTrainingOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NlarxConfig {
    /// output channel; the first output when absent
    pub output: Option<String>,
    /// regressors in their printed form, e.g. `y1(t-1)` or `y1(t-1)*u1(t-2)`
    pub regressor_names: Vec<String>,
    pub regressors: Vec<RegressorSpec>,
    /// Output lags `1..=na` and input lags `1..=nb` as linear regressors.
    /// When both are absent, `na = nb = 2` is used unless other regressors
    /// are listed.
    pub na: Option<usize>,
    pub nb: Option<usize>,
    pub mapping: MappingSpec,
    pub training: NlarxTrainingOptions,
}

impl Default for NlarxConfig {
    fn default() -> Self {
        Self {
            output: None,
            regressor_names: Vec::new(),
            regressors: Vec::new(),
            na: None,
            nb: None,
            mapping: MappingSpec::LinearInRegressors,
            training: NlarxTrainingOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StaticNlConfig {
    Network {
        layer_sizes: Vec<usize>,
        #[serde(default)]
        activation: Activation,
    },
    /// starts as the identity
    Polynomial { degree: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NlhwConfig {
    pub max_order: usize,
    pub input_nl: Option<StaticNlConfig>,
    pub output_nl: Option<StaticNlConfig>,
    pub normalization: NormalizationMethod,
    pub training: HwTrainingOptions,
}

impl Default for NlhwConfig {
    fn default() -> Self {
        Self {
            max_order: 10,
            input_nl: None,
            output_nl: Some(StaticNlConfig::Network {
                layer_sizes: vec![5, 5],
                activation: Activation::Tanh,
            }),
            normalization: NormalizationMethod::Zscore,
            training: HwTrainingOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparsifyConfig {
    pub options: SparsificationOptions,
    /// options of the re-fit on the surviving regressors
    pub training: NlarxTrainingOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSystemConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EkfConfig {
    /// initial estimate; the first measured states when absent
    pub x0: Option<Vec<f64>>,
    /// diagonals; a single value is repeated
    pub p0: Vec<f64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    /// linear system instead of a model document
    pub linear: Option<LinearSystemConfig>,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            x0: None,
            p0: vec![1.0],
            q: vec![1e-4],
            r: vec![1e-2],
            linear: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<Task>,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// model documents read by sparsify, compare, simulate and ekf
    pub models: Vec<PathBuf>,
    pub plot: bool,
    pub data: DataConfig,
    pub benchgen: BenchgenConfig,
    pub nlss: NlssConfig,
    pub nlarx: NlarxConfig,
    pub nlhw: NlhwConfig,
    pub sparsify: SparsifyConfig,
    pub ekf: EkfConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: None,
            seed: 0,
            output_dir: None,
            models: Vec::new(),
            plot: true,
            data: DataConfig::default(),
            benchgen: BenchgenConfig::default(),
            nlss: NlssConfig::default(),
            nlarx: NlarxConfig::default(),
            nlhw: NlhwConfig::default(),
            sparsify: SparsifyConfig::default(),
            ekf: EkfConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot write resolved config: {e}")))
    }
}

#[derive(Debug, Parser)]
#[command(name = "sysid", version, about = "Nonlinear system identification")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a neural state-space model
    TrainNlss(Overrides),
    /// Train a nonlinear ARX model
    TrainNlarx(Overrides),
    /// Train a Hammerstein-Wiener model
    TrainNlhw(Overrides),
    /// Select regressors of a trained nonlinear ARX model
    Sparsify(Overrides),
    /// Score models against measured data
    Compare(Overrides),
    /// Simulate a model on the inputs of a data set
    Simulate(Overrides),
    /// Run an extended Kalman filter over a data set
    Ekf(Overrides),
    /// Generate a synthetic benchmark data set
    Benchgen(Overrides),
}

#[derive(Debug, Clone, Default, Args)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// estimation CSV table
    #[arg(long)]
    data: Option<PathBuf>,
    /// validation CSV table
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    input_matrix: Option<PathBuf>,
    #[arg(long)]
    output_matrix: Option<PathBuf>,
    #[arg(long)]
    validation_input_matrix: Option<PathBuf>,
    #[arg(long)]
    validation_output_matrix: Option<PathBuf>,
    #[arg(long)]
    sample_time: Option<f64>,
    /// model document (repeat for compare)
    #[arg(long = "model")]
    models: Vec<PathBuf>,
    #[arg(long)]
    system: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    max_order: Option<usize>,
    #[arg(long)]
    no_plot: bool,
}

impl Command {
    fn split(self) -> (Task, Overrides) {
        match self {
            Command::TrainNlss(o) => (Task::TrainNlss, o),
            Command::TrainNlarx(o) => (Task::TrainNlarx, o),
            Command::TrainNlhw(o) => (Task::TrainNlhw, o),
            Command::Sparsify(o) => (Task::Sparsify, o),
            Command::Compare(o) => (Task::Compare, o),
            Command::Simulate(o) => (Task::Simulate, o),
            Command::Ekf(o) => (Task::Ekf, o),
            Command::Benchgen(o) => (Task::Benchgen, o),
        }
    }
}

fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Config => "config",
        ErrorKind::Data => "data",
        ErrorKind::Numerical => "numerical",
    }
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    task: &'a str,
    kind: &'a str,
    exit_code: i32,
    message: String,
}

fn resolve(task: Task, o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(t) = cfg.task {
        if t != task {
            return Err(Error::Config(format!(
                "config is for task {}, command is {}",
                t.name(),
                task.name()
            )));
        }
    }
    cfg.task = Some(task);
    if let Some(d) = &o.output_dir {
        cfg.output_dir = Some(d.clone());
    }
    if cfg.output_dir.is_none() {
        cfg.output_dir = Some(default_output_dir());
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    let d = &mut cfg.data;
    let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
        if let Some(v) = v {
            *slot = Some(v.clone());
        }
    };
    set(&mut d.estimation, &o.data);
    set(&mut d.validation, &o.validation);
    set(&mut d.input_matrix, &o.input_matrix);
    set(&mut d.output_matrix, &o.output_matrix);
    set(&mut d.validation_input_matrix, &o.validation_input_matrix);
    set(&mut d.validation_output_matrix, &o.validation_output_matrix);
    if o.sample_time.is_some() {
        d.sample_time = o.sample_time;
    }
    if !o.models.is_empty() {
        cfg.models = o.models.clone();
    }
    if let Some(s) = &o.system {
        cfg.benchgen.system = s.clone();
    }
    if let Some(n) = o.samples {
        cfg.benchgen.samples = n;
    }
    if o.noise.is_some() {
        cfg.benchgen.options.noise = o.noise;
    }
    if let Some(l) = o.lambda {
        cfg.sparsify.options.lambda = l;
    }
    if let Some(e) = o.max_epochs {
        cfg.nlss.training.training.max_epochs = e;
        cfg.nlarx.training.training.max_epochs = e;
    }
    if let Some(m) = o.max_order {
        cfg.nlhw.max_order = m;
    }
    if o.no_plot {
        cfg.plot = false;
    }
    Ok(cfg)
}

fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
}

/// Parses `args` (program name first), runs the task and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (task, overrides) = cli.command.split();
    let outcome = resolve(task, &overrides).and_then(|cfg| {
        let dir = cfg.output_dir.clone().expect("resolved");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write(&dir.join("resolved_config.toml"), &cfg.to_toml()?)?;
        execute(task, &cfg, &dir)
    });
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            let kind = e.kind();
            let code = exit_code(kind);
            eprintln!("sysid {}: {} error: {e}", task.name(), kind_name(kind));
            let dir = overrides.output_dir.clone().unwrap_or_else(|| {
                overrides
                    .config
                    .as_ref()
                    .and_then(|p| RunConfig::load(p).ok())
                    .and_then(|c| c.output_dir)
                    .unwrap_or_else(default_output_dir)
            });
            let record = ErrorRecord {
                task: task.name(),
                kind: kind_name(kind),
                exit_code: code,
                message: e.to_string(),
            };
            if std::fs::create_dir_all(&dir).is_ok() {
                if let Ok(text) = to_json(&record) {
                    let _ = std::fs::write(dir.join("error.json"), text);
                }
            }
            code
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn execute(task: Task, cfg: &RunConfig, dir: &Path) -> Result<()> {
    match task {
        Task::Benchgen => run_benchgen(cfg, dir),
        Task::TrainNlss => run_train_nlss(cfg, dir),
        Task::TrainNlarx => run_train_nlarx(cfg, dir),
        Task::TrainNlhw => run_train_nlhw(cfg, dir),
        Task::Sparsify => run_sparsify(cfg, dir),
        Task::Compare => run_compare(cfg, dir),
        Task::Simulate => run_simulate(cfg, dir),
        Task::Ekf => run_ekf(cfg, dir),
    }
}

// ---------------------------------------------------------------- data

/// Whitespace- or comma-separated numbers, one sample per line. Blank lines
/// and lines starting with `#` are skipped.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .enumerate()
            .map(|(j, s)| {
                s.parse::<f64>().map_err(|_| Error::Parse {
                    row: i,
                    column: format!("{} column {}", path.display(), j + 1),
                    cell: s.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{}: line {} has {} values, expected {}",
                    path.display(),
                    i + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(n, m, |r, c| rows[r][c]))
}

fn schema_for(path: &Path, cfg: &DataConfig) -> Result<CsvSchema> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Config(format!("{}: {other:?}", path.display())),
        })?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let (inputs, outputs) = if cfg.inputs.is_empty() && cfg.outputs.is_empty() {
        let pick = |p: char| {
            headers
                .iter()
                .filter(|h| h.starts_with(p) && h.len() > 1 && h[1..].chars().all(|c| c.is_ascii_digit()))
                .cloned()
                .collect::<Vec<_>>()
        };
        (pick('u'), pick('y'))
    } else {
        (cfg.inputs.clone(), cfg.outputs.clone())
    };
    if outputs.is_empty() {
        return Err(Error::Config(format!("{}: no output columns selected", path.display())));
    }
    let time_column = cfg
        .time_column
        .clone()
        .or_else(|| headers.iter().any(|h| h == "t").then(|| "t".to_string()));
    Ok(CsvSchema {
        input_names: inputs,
        output_names: outputs,
        time_column,
        sample_time: cfg.sample_time,
    })
}

fn load_one(
    cfg: &DataConfig,
    table: &Option<PathBuf>,
    u: &Option<PathBuf>,
    y: &Option<PathBuf>,
    what: &str,
) -> Result<Option<SignalTable>> {
    match (table, u, y) {
        (Some(_), Some(_), _) | (Some(_), _, Some(_)) => Err(Error::Config(format!(
            "{what} data given both as a table and as matrices"
        ))),
        (Some(p), None, None) => Ok(Some(read_csv(p, &schema_for(p, cfg)?)?)),
        (None, u, Some(y)) => {
            let ts = cfg
                .sample_time
                .ok_or_else(|| Error::Config("matrix data needs data.sample_time".into()))?;
            let y = read_matrix(y)?;
            let u = match u {
                Some(u) => read_matrix(u)?,
                None => DMatrix::zeros(y.nrows(), 0),
            };
            Ok(Some(SignalTable::from_matrices(u, y, ts, 0.0)?))
        }
        (None, Some(_), None) => Err(Error::Config(format!("{what} input matrix given without an output matrix"))),
        (None, None, None) => Ok(None),
    }
}

struct Data {
    estimation: Option<SignalTable>,
    validation: Option<SignalTable>,
}

impl Data {
    fn load(cfg: &DataConfig) -> Result<Self> {
        Ok(Self {
            estimation: load_one(cfg, &cfg.estimation, &cfg.input_matrix, &cfg.output_matrix, "estimation")?,
            validation: load_one(
                cfg,
                &cfg.validation,
                &cfg.validation_input_matrix,
                &cfg.validation_output_matrix,
                "validation",
            )?,
        })
    }

    fn estimation(&self) -> Result<&SignalTable> {
        self.estimation
            .as_ref()
            .ok_or_else(|| Error::Config("estimation data required (data.estimation or matrices)".into()))
    }

    /// Validation set, falling back to the estimation set.
    fn scoring(&self) -> Result<(&'static str, &SignalTable)> {
        match (&self.validation, &self.estimation) {
            (Some(v), _) => Ok(("validation", v)),
            (None, Some(e)) => Ok(("estimation", e)),
            (None, None) => Err(Error::Config("no data to evaluate on".into())),
        }
    }

    fn sets(&self) -> Vec<(&'static str, &SignalTable)> {
        let mut v = Vec::new();
        if let Some(e) = &self.estimation {
            v.push(("estimation", e));
        }
        if let Some(d) = &self.validation {
            v.push(("validation", d));
        }
        v
    }
}

// ---------------------------------------------------------------- responses

/// Measured and simulated outputs of one model on one data set.
struct Response {
    names: Vec<String>,
    time: Vec<f64>,
    measured: DMatrix<f64>,
    simulated: DMatrix<f64>,
}

impl Response {
    fn fit(&self) -> Result<Vec<f64>> {
        fit_percent(&self.measured, &self.simulated)
    }
}

fn measured_columns(data: &SignalTable, names: &[String], first: usize) -> Result<DMatrix<f64>> {
    let cols = names
        .iter()
        .map(|n| data.channel(n).ok_or_else(|| Error::MissingColumn(n.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(data.len() - first, names.len(), |r, c| cols[c][r + first]))
}

fn nss_x0(model: &NeuralStateSpaceModel, data: &SignalTable) -> Result<Vec<f64>> {
    let nx = model.nx();
    let names = &model.output_names()[..nx];
    names
        .iter()
        .map(|n| {
            data.channel(n)
                .map(|c| c[0])
                .ok_or_else(|| Error::MissingColumn(n.clone()))
        })
        .collect()
}

fn respond(model: &Model, data: &SignalTable) -> Result<Response> {
    let times = |first: usize| (first..data.len()).map(|k| data.time(k)).collect::<Vec<_>>();
    match model {
        Model::NeuralStateSpace(m) => {
            let x0 = nss_x0(m, data)?;
            let step = m.is_continuous().then(|| data.sample_time());
            let sim = m.simulate(data, &x0, step)?;
            Ok(Response {
                names: m.output_names().to_vec(),
                time: times(0),
                measured: measured_columns(data, m.output_names(), 0)?,
                simulated: sim.outputs,
            })
        }
        Model::Nlarx(m) => {
            let y = m.simulate(data)?;
            let first = data.len() - y.len();
            let names = vec![m.output_name().to_string()];
            Ok(Response {
                time: times(first),
                measured: measured_columns(data, &names, first)?,
                simulated: DMatrix::from_column_slice(y.len(), 1, &y),
                names,
            })
        }
        Model::HammersteinWiener(m) => Ok(Response {
            names: m.output_names().to_vec(),
            time: times(0),
            measured: measured_columns(data, m.output_names(), 0)?,
            simulated: m.simulate(data)?,
        }),
    }
}

fn fit_rows(rows: &mut String, label: &str, resp: &Response) -> Result<()> {
    for (name, f) in resp.names.iter().zip(resp.fit()?) {
        writeln!(rows, "{label},{name},{}", fmt_num(f)).expect("string write");
    }
    Ok(())
}

fn write_fit_report(dir: &Path, model: &Model, data: &Data) -> Result<Vec<(&'static str, Response)>> {
    let mut text = String::from("dataset,channel,fit_percent\n");
    let mut out = Vec::new();
    for (label, d) in data.sets() {
        let r = respond(model, d)?;
        fit_rows(&mut text, label, &r)?;
        out.push((label, r));
    }
    write(&dir.join("fit.csv"), &text)?;
    Ok(out)
}

fn write_plot(dir: &Path, file: &str, title: &str, time: &[f64], names: &[String], series: &[(String, DMatrix<f64>)]) -> Result<()> {
    write(&dir.join(file), &svg_plot(title, time, names, series))
}

/// Line plot with one panel per output channel. The first series is drawn
/// as the measurement.
pub fn svg_plot(title: &str, time: &[f64], names: &[String], series: &[(String, DMatrix<f64>)]) -> String {
    const W: f64 = 800.0;
    const PANEL: f64 = 220.0;
    const MARGIN: f64 = 50.0;
    const COLORS: [&str; 6] = ["#000000", "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let height = 40.0 + PANEL * names.len() as f64;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{height}" viewBox="0 0 {W} {height}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, xml_escape(title)).unwrap();
    let (t0, t1) = (time.first().copied().unwrap_or(0.0), time.last().copied().unwrap_or(1.0));
    let tspan = if t1 > t0 { t1 - t0 } else { 1.0 };
    for (c, name) in names.iter().enumerate() {
        let top = 40.0 + PANEL * c as f64;
        let (x0, x1, y0, y1) = (MARGIN, W - 20.0, top + 10.0, top + PANEL - 30.0);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (_, m) in series {
            for v in m.column(c).iter().filter(|v| v.is_finite()) {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        if !(hi > lo) {
            lo -= 1.0;
            hi += 1.0;
        }
        writeln!(s, r##"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="#888"/>"##, x1 - x0, y1 - y0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, x0 + 5.0, y0 + 14.0, xml_escape(name)).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, x0 - 4.0, y0 + 10.0, hi).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, x0 - 4.0, y1, lo).unwrap();
        for (k, (label, m)) in series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let mut pts = String::new();
            for (r, t) in time.iter().enumerate() {
                let v = m[(r, c)];
                if !v.is_finite() {
                    continue;
                }
                let px = x0 + (t - t0) / tspan * (x1 - x0);
                let py = y1 - (v - lo) / (hi - lo) * (y1 - y0);
                write!(pts, "{px:.2},{py:.2} ").unwrap();
            }
            writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1" points="{}"/>"#, pts.trim_end()).unwrap();
            writeln!(
                s,
                r#"<text x="{}" y="{}" fill="{color}" text-anchor="end">{}</text>"#,
                x1 - 5.0,
                y0 + 14.0 * (k + 1) as f64,
                xml_escape(label)
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn plot_response(dir: &Path, cfg: &RunConfig, label: &str, resp: &Response) -> Result<()> {
    if !cfg.plot {
        return Ok(());
    }
    let fits = resp.fit()?;
    let title = format!(
        "{label}: {}",
        resp.names
            .iter()
            .zip(&fits)
            .map(|(n, f)| format!("{n} fit {f:.2}%"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    write_plot(
        dir,
        "compare.svg",
        &title,
        &resp.time,
        &resp.names,
        &[("measured".into(), resp.measured.clone()), ("model".into(), resp.simulated.clone())],
    )
}

fn write_trace(dir: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    write(&dir.join("trace.csv"), &text)
}

fn finish_training(dir: &Path, cfg: &RunConfig, model: &Model, data: &Data) -> Result<()> {
    save_model(model, dir.join("model.json"))?;
    let responses = write_fit_report(dir, model, data)?;
    if let Some((label, r)) = responses.iter().find(|(l, _)| *l == "validation").or(responses.first()) {
        plot_response(dir, cfg, label, r)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- tasks

fn run_benchgen(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let b = benchgen::generate(&cfg.benchgen.system, cfg.benchgen.samples, cfg.seed, &cfg.benchgen.options)?;
    b.estimation.write_csv(dir.join("estimation.csv"))?;
    b.validation.write_csv(dir.join("validation.csv"))?;
    write(&dir.join("metadata.json"), &to_json(&b.metadata)?)
}

fn run_train_nlss(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let data = Data::load(&cfg.data)?;
    let est = data.estimation()?;
    let c = &cfg.nlss;
    let ny = est.num_outputs();
    let nx = c.nx.unwrap_or(ny);
    let spec = NssSpec {
        nx,
        nu: est.num_inputs(),
        ny,
        ts: if c.continuous { 0.0 } else { est.sample_time() },
        latent_dim: c.latent_dim,
        time_invariant: c.time_invariant,
        seed: cfg.seed,
    };
    let mut model = NeuralStateSpaceModel::new(&spec)?;
    if let Some(layers) = &c.state_layers {
        let net = model.state_net();
        let replacement = create_mlp(net.input_dim(), net.output_dim(), layers, c.activation, InitSpec::glorot(cfg.seed))?;
        model.set_state_net(replacement)?;
    }
    let mut opts = c.training.clone();
    if c.continuous && opts.ode_step.is_none() {
        opts.ode_step = Some(est.sample_time());
    }
    let segments = match c.segment_length {
        Some(len) => segment(est, len, len)?.as_slice().to_vec(),
        None => vec![est.clone()],
    };
    let (trained, report) = neural_ss::train_nss(&model, &segments, &opts)?;
    write_trace(
        dir,
        "epoch,loss,grad_norm",
        report
            .trace
            .iter()
            .map(|r| format!("{},{},{}", r.epoch, fmt_num(r.loss), fmt_num(r.grad_norm))),
    )?;
    finish_training(dir, cfg, &Model::NeuralStateSpace(trained), &data)
}

fn nlarx_specs(c: &NlarxConfig, output: &str, inputs: &[String]) -> Result<Vec<RegressorSpec>> {
    let mut specs = Vec::new();
    let listed = !c.regressors.is_empty() || !c.regressor_names.is_empty();
    let (na, nb) = match (c.na, c.nb) {
        (None, None) if listed => (0, 0),
        (na, nb) => (na.unwrap_or(2), nb.unwrap_or(2)),
    };
    let mut vars: Vec<&str> = Vec::new();
    let mut lags: Vec<Vec<usize>> = Vec::new();
    if na > 0 {
        vars.push(output);
        lags.push((1..=na).collect());
    }
    if nb > 0 {
        for i in inputs {
            vars.push(i);
            lags.push((1..=nb).collect());
        }
    }
    if !vars.is_empty() {
        let lag_refs: Vec<&[usize]> = lags.iter().map(Vec::as_slice).collect();
        specs.push(RegressorSpec::linear(&vars, &lag_refs));
    }
    specs.extend(c.regressors.iter().cloned());
    for name in &c.regressor_names {
        specs.push(RegressorSpec::parse(name)?);
    }
    if specs.is_empty() {
        return Err(Error::Config("the nonlinear ARX model has no regressors".into()));
    }
    Ok(specs)
}

fn run_train_nlarx(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let data = Data::load(&cfg.data)?;
    let est = data.estimation()?;
    let c = &cfg.nlarx;
    let output = c.output.clone().unwrap_or_else(|| est.output_names()[0].clone());
    let inputs = est.input_names().to_vec();
    let specs = nlarx_specs(c, &output, &inputs)?;
    let model = NlarxModel::new(&output, &inputs, est.sample_time(), specs, &c.mapping, cfg.seed)?;
    let (trained, report) = train_nlarx(&model, std::slice::from_ref(est), &c.training)?;
    write_trace(
        dir,
        "iteration,cost",
        report.cost_trace.iter().enumerate().map(|(i, v)| format!("{i},{}", fmt_num(*v))),
    )?;
    finish_training(dir, cfg, &Model::Nlarx(trained), &data)
}

fn static_nl(c: &Option<StaticNlConfig>, seed: u64) -> Result<StaticNonlinearity> {
    Ok(match c {
        None => StaticNonlinearity::Identity,
        Some(StaticNlConfig::Network { layer_sizes, activation }) => {
            StaticNonlinearity::network(layer_sizes, *activation, seed)?
        }
        Some(StaticNlConfig::Polynomial { degree }) => {
            let mut coeffs = vec![0.0; degree + 1];
            if *degree >= 1 {
                coeffs[1] = 1.0;
            }
            StaticNonlinearity::Polynomial { coeffs }
        }
    })
}

fn run_train_nlhw(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let data = Data::load(&cfg.data)?;
    let est = data.estimation()?;
    let c = &cfg.nlhw;
    let norm = NormalizationState::fit(est, c.normalization)?;
    let scaled = norm.apply(est)?;
    let lin = fit_linear_auto(&scaled, c.max_order)?;
    let (nu, ny) = (est.num_inputs(), est.num_outputs());
    let model = HwModel::new(lin.block)?
        .with_input_nl((0..nu).map(|i| static_nl(&c.input_nl, cfg.seed + i as u64)).collect::<Result<_>>()?)?
        .with_output_nl(
            (0..ny)
                .map(|i| static_nl(&c.output_nl, cfg.seed + (nu + i) as u64))
                .collect::<Result<_>>()?,
        )?
        .with_normalization(norm)?
        .with_channel_names(est.input_names().to_vec(), est.output_names().to_vec())?;
    let (trained, report) = train_hw(&model, std::slice::from_ref(est), &c.training)?;
    write_trace(
        dir,
        "iteration,cost",
        report.cost_trace.iter().enumerate().map(|(i, v)| format!("{i},{}", fmt_num(*v))),
    )?;
    let mut orders = String::from("output,order\n");
    for (name, o) in est.output_names().iter().zip(&lin.orders) {
        writeln!(orders, "{name},{o}").unwrap();
    }
    write(&dir.join("linear_order.csv"), &orders)?;
    finish_training(dir, cfg, &Model::HammersteinWiener(trained), &data)
}

fn one_model(cfg: &RunConfig) -> Result<Model> {
    match cfg.models.as_slice() {
        [p] => load_model(p),
        [] => Err(Error::Config("a model document is required (models or --model)".into())),
        _ => Err(Error::Config("exactly one model document expected".into())),
    }
}

fn run_sparsify(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let data = Data::load(&cfg.data)?;
    let est = data.estimation()?;
    let Model::Nlarx(model) = one_model(cfg)? else {
        return Err(Error::Config("sparsify needs a nonlinear ARX model".into()));
    };
    let (sparse, report) = sparsify(&model, std::slice::from_ref(est), &cfg.sparsify.options, &cfg.sparsify.training)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf).map_err(|e| Error::io(dir.join("regressors.csv"), e))?;
    std::fs::write(dir.join("regressors.csv"), buf).map_err(|e| Error::io(dir.join("regressors.csv"), e))?;
    finish_training(dir, cfg, &Model::Nlarx(sparse), &data)
}

#[derive(Serialize)]
struct ChannelFit {
    channel: String,
    fit_percent: f64,
}

#[derive(Serialize)]
struct ModelSummary {
    model: String,
    kind: String,
    fit: Vec<ChannelFit>,
    active_regressors: Option<Vec<String>>,
}

#[derive(Serialize)]
struct CompareReport {
    dataset: String,
    models: Vec<ModelSummary>,
}

fn run_compare(cfg: &RunConfig, dir: &Path) -> Result<()> {
    if cfg.models.is_empty() {
        return Err(Error::Config("compare needs at least one model document".into()));
    }
    let data = Data::load(&cfg.data)?;
    let (label, set) = data.scoring()?;
    let mut text = String::from("model,channel,fit_percent\n");
    let mut summaries = Vec::new();
    let mut series: Vec<(String, DMatrix<f64>)> = Vec::new();
    let mut frame: Option<(Vec<f64>, Vec<String>, usize)> = None;
    for path in &cfg.models {
        let model = load_model(path)?;
        let resp = respond(&model, set)?;
        let fits = resp.fit()?;
        let shown = path.display().to_string();
        for (n, f) in resp.names.iter().zip(&fits) {
            writeln!(text, "{shown},{n},{}", fmt_num(*f)).unwrap();
        }
        let active = match &model {
            Model::Nlarx(m) => Some(m.active_regressors()),
            _ => None,
        };
        summaries.push(ModelSummary {
            model: shown.clone(),
            kind: model.kind().to_string(),
            fit: resp
                .names
                .iter()
                .zip(&fits)
                .map(|(n, f)| ChannelFit {
                    channel: n.clone(),
                    fit_percent: *f,
                })
                .collect(),
            active_regressors: active,
        });
        // models share the plot when they cover the same channels
        let first = set.len() - resp.time.len();
        match &frame {
            None => {
                series.push(("measured".into(), resp.measured.clone()));
                frame = Some((resp.time.clone(), resp.names.clone(), first));
                series.push((shown, resp.simulated));
            }
            Some((_, names, start)) if *names == resp.names => {
                let pad = first.max(*start);
                let mut m = DMatrix::from_element(set.len() - *start, names.len(), f64::NAN);
                let off = pad - *start;
                let src = pad - first;
                m.rows_mut(off, set.len() - pad).copy_from(&resp.simulated.rows(src, set.len() - pad));
                series.push((shown, m));
            }
            Some(_) => {}
        }
    }
    write(&dir.join("fit.csv"), &text)?;
    write(
        &dir.join("report.json"),
        &to_json(&CompareReport {
            dataset: label.to_string(),
            models: summaries,
        })?,
    )?;
    if cfg.plot {
        if let Some((time, names, _)) = frame {
            write_plot(dir, "compare.svg", &format!("{label} data"), &time, &names, &series)?;
        }
    }
    Ok(())
}

fn run_simulate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let data = Data::load(&cfg.data)?;
    let (_, set) = data.scoring()?;
    let model = one_model(cfg)?;
    let resp = respond(&model, set)?;
    let mut text = String::from("t");
    for n in &resp.names {
        write!(text, ",{n}").unwrap();
    }
    text.push('\n');
    for (r, t) in resp.time.iter().enumerate() {
        text.push_str(&fmt_num(*t));
        for c in 0..resp.names.len() {
            write!(text, ",{}", fmt_num(resp.simulated[(r, c)])).unwrap();
        }
        text.push('\n');
    }
    write(&dir.join("simulation.csv"), &text)?;
    if cfg.plot {
        plot_response(dir, cfg, "simulation", &resp)?;
    }
    Ok(())
}

fn diagonal(v: &[f64], n: usize, what: &str) -> Result<DMatrix<f64>> {
    let d = match v.len() {
        1 => vec![v[0]; n],
        k if k == n => v.to_vec(),
        k => return Err(Error::Config(format!("ekf.{what} has {k} entries, expected 1 or {n}"))),
    };
    Ok(DMatrix::from_diagonal(&DVector::from_vec(d)))
}

fn matrix_rows(rows: &[Vec<f64>], what: &str, cols_if_empty: usize) -> Result<DMatrix<f64>> {
    let c = rows.first().map_or(cols_if_empty, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return Err(Error::Config(format!("ekf.linear.{what} rows differ in length")));
    }
    Ok(DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j]))
}

fn run_ekf(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let data = Data::load(&cfg.data)?;
    let (_, set) = data.scoring()?;
    match &cfg.ekf.linear {
        Some(l) => {
            let a = matrix_rows(&l.a, "a", 0)?;
            let b = matrix_rows(&l.b, "b", 0)?;
            let c = matrix_rows(&l.c, "c", a.nrows())?;
            let d = matrix_rows(&l.d, "d", b.ncols())?;
            let model = LinearModel::new(a, b, c, d)?;
            let x0 = cfg.ekf.x0.clone().unwrap_or_else(|| vec![0.0; model.nx()]);
            filter(cfg, dir, model, x0, set)
        }
        None => match one_model(cfg)? {
            Model::NeuralStateSpace(m) => {
                let x0 = match &cfg.ekf.x0 {
                    Some(x) => x.clone(),
                    None => nss_x0(&m, set)?,
                };
                filter(cfg, dir, m, x0, set)
            }
            _ => Err(Error::Config("ekf needs a neural state-space model or ekf.linear".into())),
        },
    }
}

fn filter<M: StateModel>(cfg: &RunConfig, dir: &Path, model: M, x0: Vec<f64>, data: &SignalTable) -> Result<()> {
    let (nx, ny) = (model.nx(), model.ny());
    if data.num_inputs() != model.nu() || data.num_outputs() != ny {
        return Err(Error::DimensionMismatch(format!(
            "filter model has {} inputs and {ny} outputs, data has {} and {}",
            model.nu(),
            data.num_inputs(),
            data.num_outputs()
        )));
    }
    let p0 = diagonal(&cfg.ekf.p0, nx, "p0")?;
    let q = diagonal(&cfg.ekf.q, nx, "q")?;
    let r = diagonal(&cfg.ekf.r, ny, "r")?;
    let mut f = Ekf::new(model, DVector::from_vec(x0), p0, q, r)?;
    let mut text = String::from("t");
    for i in 1..=nx {
        write!(text, ",x{i}").unwrap();
    }
    for i in 1..=nx {
        write!(text, ",p{i}").unwrap();
    }
    for n in data.output_names() {
        write!(text, ",innovation_{n}").unwrap();
    }
    text.push_str(",nis\n");
    let mut estimates = DMatrix::zeros(data.len(), ny.min(nx));
    for k in 0..data.len() {
        let u: Vec<f64> = data.inputs().row(k).iter().copied().collect();
        let y: Vec<f64> = data.outputs().row(k).iter().copied().collect();
        let inn = f.correct(&y, &u)?;
        text.push_str(&fmt_num(data.time(k)));
        for v in f.state().iter() {
            write!(text, ",{}", fmt_num(*v)).unwrap();
        }
        for i in 0..nx {
            write!(text, ",{}", fmt_num(f.covariance()[(i, i)])).unwrap();
        }
        for v in inn.residual.iter() {
            write!(text, ",{}", fmt_num(*v)).unwrap();
        }
        writeln!(text, ",{}", fmt_num(inn.nis)).unwrap();
        for c in 0..estimates.ncols() {
            estimates[(k, c)] = f.state()[c];
        }
        f.predict(&u)?;
    }
    write(&dir.join("ekf.csv"), &text)?;
    if cfg.plot && estimates.ncols() > 0 {
        let names: Vec<String> = data.output_names()[..estimates.ncols()].to_vec();
        let measured = data.outputs().columns(0, estimates.ncols()).into_owned();
        let time: Vec<f64> = (0..data.len()).map(|k| data.time(k)).collect();
        write_plot(
            dir,
            "ekf.svg",
            "filtered states",
            &time,
            &names,
            &[("measured".into(), measured), ("estimate".into(), estimates)],
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn misspelled_key_is_named() {
        let err = RunConfig::from_toml("seed = 1\n[nlarx.training]\nfocuss = \"simulation\"\n").unwrap_err();
        assert_eq!(err.kind(), ErrorKind::Config);
        assert!(err.to_string().contains("focuss"), "{err}");
        let err = RunConfig::from_toml("[nlss.training.training]\nlerning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("lerning_rate"), "{err}");
    }

    #[test]
    fn resolved_config_roundtrips() {
        let mut cfg = RunConfig {
            task: Some(Task::TrainNlarx),
            ..RunConfig::default()
        };
        cfg.nlarx.regressors = vec![RegressorSpec::linear(&["y1"], &[&[1, 2]])];
        cfg.nlarx.mapping = MappingSpec::SigmoidNetwork { units: 3 };
        cfg.benchgen.options.input = Some(benchgen::InputProgram::Prbs {
            amplitude: 1.0,
            offset: 0.0,
            hold: 3,
        });
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn svg_is_well_formed() {
        let t = vec![0.0, 1.0, 2.0];
        let m = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 1.5]);
        let s = svg_plot("a < b", &t, &["y1".into()], &[("measured".into(), m.clone()), ("model".into(), m)]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a &lt; b"));
        assert_eq!(s.matches("<polyline").count(), 2);
    }
}
