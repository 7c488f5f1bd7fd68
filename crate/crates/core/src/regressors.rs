//! Regressor dictionaries: lagged linear, polynomial, periodic and custom
//! terms over named input/output channels.
//!
//! A positive lag `k` refers to the value at `t - k`. Every generated
//! regressor carries a canonical name such as `y1(t-2)`, `u1(t-1)^2`,
//! `sin(1.5*u1(t-3))` or `y1(t-1)*u1(t-2)`; [`RegressorSpec::parse`] reads
//! the same grammar back.

use std::collections::HashSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::signal_data::SignalTable;

/// Pure functions available to custom regressors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CustomFn {
    /// product of two or more terms
    Product,
    Abs,
    Tanh,
    Sigmoid,
}

impl CustomFn {
    fn arity_ok(self, n: usize) -> bool {
        match self {
            CustomFn::Product => n >= 2,
            _ => n == 1,
        }
    }

    fn label(self) -> &'static str {
        match self {
            CustomFn::Product => "product",
            CustomFn::Abs => "abs",
            CustomFn::Tanh => "tanh",
            CustomFn::Sigmoid => "sigmoid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaggedVariable {
    pub variable: String,
    pub lag: usize,
}

/// One entry of a regressor dictionary description.
///
/// `lags` holds one lag list per variable; a single list applies to every
/// variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegressorSpec {
    Linear {
        variables: Vec<String>,
        lags: Vec<Vec<usize>>,
    },
    /// Powers `2..=degree` of each lagged variable.
    Polynomial {
        variables: Vec<String>,
        lags: Vec<Vec<usize>>,
        degree: u32,
    },
    /// `sin(w * v)` and/or `cos(w * v)` per frequency `w`.
    Periodic {
        variables: Vec<String>,
        lags: Vec<Vec<usize>>,
        frequencies: Vec<f64>,
        #[serde(default = "yes")]
        use_sin: bool,
        #[serde(default = "yes")]
        use_cos: bool,
    },
    Custom {
        function: CustomFn,
        terms: Vec<LaggedVariable>,
    },
}

fn yes() -> bool {
    true
}

impl RegressorSpec {
    pub fn linear(variables: &[&str], lags: &[&[usize]]) -> Self {
        RegressorSpec::Linear {
            variables: variables.iter().map(|s| s.to_string()).collect(),
            lags: lags.iter().map(|l| l.to_vec()).collect(),
        }
    }

    /// Parses one canonical regressor name into a single-term spec.
    pub fn parse(name: &str) -> Result<Self> {
        let s: String = name.chars().filter(|c| !c.is_whitespace()).collect();
        let bad = || Error::Config(format!("cannot parse regressor '{name}'"));
        for (prefix, func) in [("abs(", CustomFn::Abs), ("tanh(", CustomFn::Tanh), ("sigmoid(", CustomFn::Sigmoid)] {
            if let Some(inner) = s.strip_prefix(prefix).and_then(|r| r.strip_suffix(')')) {
                let term = parse_lagged(inner).ok_or_else(bad)?;
                return Ok(RegressorSpec::Custom {
                    function: func,
                    terms: vec![term],
                });
            }
        }
        for (prefix, is_sin) in [("sin(", true), ("cos(", false)] {
            if let Some(inner) = s.strip_prefix(prefix).and_then(|r| r.strip_suffix(')')) {
                let (w, v) = inner.split_once('*').ok_or_else(bad)?;
                let w: f64 = w.parse().map_err(|_| bad())?;
                let term = parse_lagged(v).ok_or_else(bad)?;
                return Ok(RegressorSpec::Periodic {
                    variables: vec![term.variable],
                    lags: vec![vec![term.lag]],
                    frequencies: vec![w],
                    use_sin: is_sin,
                    use_cos: !is_sin,
                });
            }
        }
        if s.contains('*') {
            let terms = s.split('*').map(parse_lagged).collect::<Option<Vec<_>>>().ok_or_else(bad)?;
            return Ok(RegressorSpec::Custom {
                function: CustomFn::Product,
                terms,
            });
        }
        if let Some((base, p)) = s.split_once('^') {
            let term = parse_lagged(base).ok_or_else(bad)?;
            let degree: u32 = p.parse().map_err(|_| bad())?;
            if degree < 2 {
                return Err(bad());
            }
            // a single power, not the whole 2..=degree family
            return Ok(RegressorSpec::Custom {
                function: CustomFn::Product,
                terms: vec![term; degree as usize],
            });
        }
        let term = parse_lagged(&s).ok_or_else(bad)?;
        Ok(RegressorSpec::Linear {
            variables: vec![term.variable],
            lags: vec![vec![term.lag]],
        })
    }
}

fn parse_lagged(s: &str) -> Option<LaggedVariable> {
    let (var, rest) = s.split_once('(')?;
    let inner = rest.strip_suffix(')')?;
    let lag = if inner == "t" {
        0
    } else {
        inner.strip_prefix("t-")?.parse().ok()?
    };
    if var.is_empty() {
        return None;
    }
    Some(LaggedVariable {
        variable: var.to_string(),
        lag,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    Input(usize),
    Output(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Lagged {
    pub channel: Channel,
    pub lag: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    Linear(Lagged),
    Power(Lagged, u32),
    Sin(Lagged, f64),
    Cos(Lagged, f64),
    Custom(CustomFn, Vec<Lagged>),
}

/// A resolved dictionary entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    pub name: String,
    pub term: Term,
}

impl Regressor {
    pub fn lagged(&self) -> Vec<Lagged> {
        match &self.term {
            Term::Linear(l) | Term::Power(l, _) | Term::Sin(l, _) | Term::Cos(l, _) => vec![*l],
            Term::Custom(_, ls) => ls.clone(),
        }
    }

    pub fn max_lag(&self) -> usize {
        self.lagged().iter().map(|l| l.lag).max().unwrap_or(0)
    }

    /// True when the term reads a past output.
    pub fn uses_output(&self) -> bool {
        self.lagged().iter().any(|l| matches!(l.channel, Channel::Output(_)))
    }

    /// Evaluates the term with `value(channel, lag)`.
    pub fn eval(&self, value: impl Fn(Lagged) -> f64) -> f64 {
        match &self.term {
            Term::Linear(l) => value(*l),
            Term::Power(l, p) => power(value(*l), *p),
            Term::Sin(l, w) => (value(*l) * w).sin(),
            Term::Cos(l, w) => (value(*l) * w).cos(),
            Term::Custom(f, ls) => {
                let first = value(ls[0]);
                match f {
                    CustomFn::Product => ls[1..].iter().fold(first, |acc, l| acc * value(*l)),
                    CustomFn::Abs => first.abs(),
                    CustomFn::Tanh => first.tanh(),
                    CustomFn::Sigmoid => 1.0 / (1.0 + (-first).exp()),
                }
            }
        }
    }

    /// Tape version of [`Regressor::eval`]; values are column vectors.
    pub fn record<'t>(&self, mut value: impl FnMut(Lagged) -> Var<'t>) -> Result<Var<'t>> {
        Ok(match &self.term {
            Term::Linear(l) => value(*l),
            Term::Power(l, p) => {
                let x = value(*l);
                let mut acc = x;
                for _ in 1..*p {
                    acc = acc.mul(x)?;
                }
                acc
            }
            Term::Sin(l, w) => value(*l).scale(*w).sin(),
            Term::Cos(l, w) => value(*l).scale(*w).cos(),
            Term::Custom(f, ls) => {
                let first = value(ls[0]);
                match f {
                    CustomFn::Product => {
                        let mut acc = first;
                        for l in &ls[1..] {
                            acc = acc.mul(value(*l))?;
                        }
                        acc
                    }
                    CustomFn::Abs => first.abs(),
                    CustomFn::Tanh => first.tanh(),
                    CustomFn::Sigmoid => first.sigmoid(),
                }
            }
        })
    }
}

fn power(x: f64, p: u32) -> f64 {
    let mut acc = x;
    for _ in 1..p {
        acc *= x;
    }
    acc
}

/// Channel names a dictionary is resolved against.
#[derive(Debug, Clone, PartialEq)]
pub struct Variables<'a> {
    pub inputs: &'a [String],
    pub outputs: &'a [String],
}

impl Variables<'_> {
    fn resolve(&self, name: &str) -> Result<Channel> {
        if let Some(i) = self.outputs.iter().position(|n| n == name) {
            return Ok(Channel::Output(i));
        }
        if let Some(i) = self.inputs.iter().position(|n| n == name) {
            return Ok(Channel::Input(i));
        }
        Err(Error::UnknownVariable(name.to_string()))
    }

    fn name(&self, c: Channel) -> &str {
        match c {
            Channel::Input(i) => &self.inputs[i],
            Channel::Output(i) => &self.outputs[i],
        }
    }

    fn lagged(&self, variable: &str, lag: usize) -> Result<Lagged> {
        let channel = self.resolve(variable)?;
        if matches!(channel, Channel::Output(_)) && lag == 0 {
            return Err(Error::InvalidArgument(format!(
                "output '{variable}' needs a lag of at least 1"
            )));
        }
        Ok(Lagged { channel, lag })
    }

    fn label(&self, l: Lagged) -> String {
        let n = self.name(l.channel);
        if l.lag == 0 {
            format!("{n}(t)")
        } else {
            format!("{n}(t-{})", l.lag)
        }
    }
}

fn lag_lists<'s>(variables: &[String], lags: &'s [Vec<usize>]) -> Result<Vec<&'s [usize]>> {
    let lists: Vec<&[usize]> = match lags.len() {
        1 => vec![lags[0].as_slice(); variables.len()],
        n if n == variables.len() => lags.iter().map(Vec::as_slice).collect(),
        n => {
            return Err(Error::InvalidArgument(format!(
                "{n} lag lists for {} variables",
                variables.len()
            )))
        }
    };
    if variables.is_empty() || lists.iter().any(|l| l.is_empty()) {
        return Err(Error::InvalidArgument("regressor variables and lag lists must be non-empty".into()));
    }
    Ok(lists)
}

fn sorted(lags: &[usize]) -> Vec<usize> {
    let mut v = lags.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Expands specs into the ordered dictionary: spec order, then variable
/// order, then ascending lag, then degree or frequency.
pub fn expand(specs: &[RegressorSpec], vars: &Variables<'_>) -> Result<Vec<Regressor>> {
    let mut out = Vec::new();
    for spec in specs {
        match spec {
            RegressorSpec::Linear { variables, lags } => {
                for (v, ls) in variables.iter().zip(lag_lists(variables, lags)?) {
                    for lag in sorted(ls) {
                        let l = vars.lagged(v, lag)?;
                        out.push(Regressor {
                            name: vars.label(l),
                            term: Term::Linear(l),
                        });
                    }
                }
            }
            RegressorSpec::Polynomial {
                variables,
                lags,
                degree,
            } => {
                if *degree < 2 {
                    return Err(Error::InvalidArgument("polynomial degree must be at least 2".into()));
                }
                for (v, ls) in variables.iter().zip(lag_lists(variables, lags)?) {
                    for lag in sorted(ls) {
                        let l = vars.lagged(v, lag)?;
                        for p in 2..=*degree {
                            out.push(Regressor {
                                name: format!("{}^{p}", vars.label(l)),
                                term: Term::Power(l, p),
                            });
                        }
                    }
                }
            }
            RegressorSpec::Periodic {
                variables,
                lags,
                frequencies,
                use_sin,
                use_cos,
            } => {
                if frequencies.is_empty() || !(*use_sin || *use_cos) {
                    return Err(Error::InvalidArgument(
                        "periodic regressors need a frequency and sin or cos".into(),
                    ));
                }
                if frequencies.iter().any(|w| !w.is_finite()) {
                    return Err(Error::InvalidArgument("frequencies must be finite".into()));
                }
                for (v, ls) in variables.iter().zip(lag_lists(variables, lags)?) {
                    for lag in sorted(ls) {
                        let l = vars.lagged(v, lag)?;
                        for &w in frequencies {
                            let arg = format!("{w}*{}", vars.label(l));
                            if *use_sin {
                                out.push(Regressor {
                                    name: format!("sin({arg})"),
                                    term: Term::Sin(l, w),
                                });
                            }
                            if *use_cos {
                                out.push(Regressor {
                                    name: format!("cos({arg})"),
                                    term: Term::Cos(l, w),
                                });
                            }
                        }
                    }
                }
            }
            RegressorSpec::Custom { function, terms } => {
                if !function.arity_ok(terms.len()) {
                    return Err(Error::InvalidArgument(format!(
                        "custom function '{}' does not take {} terms",
                        function.label(),
                        terms.len()
                    )));
                }
                let ls = terms
                    .iter()
                    .map(|t| vars.lagged(&t.variable, t.lag))
                    .collect::<Result<Vec<_>>>()?;
                let labels: Vec<String> = ls.iter().map(|l| vars.label(*l)).collect();
                let name = match function {
                    CustomFn::Product if labels.iter().all(|s| *s == labels[0]) => {
                        format!("{}^{}", labels[0], labels.len())
                    }
                    CustomFn::Product => labels.join("*"),
                    f => format!("{}({})", f.label(), labels[0]),
                };
                out.push(Regressor {
                    name,
                    term: Term::Custom(*function, ls),
                });
            }
        }
    }
    let mut seen = HashSet::new();
    for r in &out {
        if !seen.insert(r.name.as_str()) {
            return Err(Error::DuplicateRegressor(r.name.clone()));
        }
    }
    Ok(out)
}

pub fn regressor_names(specs: &[RegressorSpec], vars: &Variables<'_>) -> Result<Vec<String>> {
    Ok(expand(specs, vars)?.into_iter().map(|r| r.name).collect())
}

pub fn max_lag(regressors: &[Regressor]) -> usize {
    regressors.iter().map(Regressor::max_lag).max().unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorMatrix {
    /// `(N - L) x R`; row `k` is time index `k + L`
    pub matrix: DMatrix<f64>,
    /// `L`, the largest lag
    pub row_offset: usize,
    pub names: Vec<String>,
}

/// Evaluates `regressors` on `data` for every time index with a full lag window.
pub fn evaluate(regressors: &[Regressor], data: &SignalTable) -> Result<RegressorMatrix> {
    let l = max_lag(regressors);
    if data.len() < l + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} samples cannot cover a lag window of {l}",
            data.len()
        )));
    }
    let (u, y) = (data.inputs(), data.outputs());
    let rows = data.len() - l;
    let mut m = DMatrix::zeros(rows, regressors.len());
    for k in 0..rows {
        let t = k + l;
        let value = |lg: Lagged| match lg.channel {
            Channel::Input(c) => u[(t - lg.lag, c)],
            Channel::Output(c) => y[(t - lg.lag, c)],
        };
        for (j, r) in regressors.iter().enumerate() {
            m[(k, j)] = r.eval(value);
        }
    }
    Ok(RegressorMatrix {
        matrix: m,
        row_offset: l,
        names: regressors.iter().map(|r| r.name.clone()).collect(),
    })
}

/// Expands `specs` against the channel names of `data` and evaluates them.
pub fn build_matrix(specs: &[RegressorSpec], data: &SignalTable) -> Result<RegressorMatrix> {
    let vars = Variables {
        inputs: data.input_names(),
        outputs: data.output_names(),
    };
    evaluate(&expand(specs, &vars)?, data)
}
