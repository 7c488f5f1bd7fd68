//! Synthetic benchmark systems.
//!
//! | name | dynamics | default input |
//! |---|---|---|
//! | `two_tank` | `dx1 = -k1 sqrt(x1) + k4 u`, `dx2 = k2 sqrt(x1) - k3 sqrt(x2)`, `y = x2`, `k = (0.5, 0.4, 0.2, 0.3)`, RK4 | steps in `[0.5, 1.5]` |
//! | `narx_toy` | `y(t) = 0.5 y(t-1) + 0.8 u(t-1) + 0.1 y(t-1) u(t-2) + e(t)`, `e ~ N(0, 0.05^2)` | uniform white in `[-1, 1]` |
//! | `linear_first_order` | `x(k+1) = 0.9 x(k) + 0.1 u(k)`, `y = x` | steps in `[-1, 1]` |
//! | `resonant2` | second-order block, poles `0.7 +- 0.4i`, `y = w` | steps in `[-1, 1]` |
//! | `wiener2` | `resonant2` followed by `y = tanh(w)` | steps in `[-1, 1]` |
//! | `robot_arm` | three inertias coupled by two spring-dampers, motor friction `0.5 v + 0.8 tanh(20 v)`, `y` = motor speed, RK4 | multisine torque |
//! | `si_engine` | `dx = (g(u) - x) / 0.4`, `g = u1 (1 + 0.5 tanh u2) - 0.3 u3^2 + 0.2 u4`, RK4 | four step channels |
//! | `ic_engine` | `dx1 = (u - x1) / 0.25`, `dx2 = 6 x1 / (1 + 0.3 x1) - 0.9 x2`, `y = x2`, RK4 | steps in `[0, 4]` |
//!
//! Every system keeps the input at zero-order hold between samples. Output
//! noise is white Gaussian with standard deviation `noise * std(y)` per
//! channel. The first 70 % of the record is the estimation set.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::UniformStream;
use crate::signal_data::SignalTable;

pub const SYSTEMS: &[&str] = &[
    "two_tank",
    "narx_toy",
    "linear_first_order",
    "resonant2",
    "wiener2",
    "robot_arm",
    "si_engine",
    "ic_engine",
];

/// Excitation signal, one per input channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputProgram {
    /// `+-amplitude` around `offset`, random sign redrawn every `hold` samples.
    Prbs { amplitude: f64, offset: f64, hold: usize },
    /// `harmonics` sines between `f_max / harmonics` and `f_max` Hz with
    /// random phases, scaled by `amplitude / sqrt(harmonics)`.
    Multisine { amplitude: f64, f_max: f64, harmonics: usize },
    /// Uniform level in `[low, high]` redrawn every `hold` samples.
    Steps { low: f64, high: f64, hold: usize },
}

impl InputProgram {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            InputProgram::Prbs { amplitude, offset, hold } => amplitude.is_finite() && offset.is_finite() && hold > 0,
            InputProgram::Multisine {
                amplitude,
                f_max,
                harmonics,
            } => amplitude.is_finite() && f_max > 0.0 && harmonics > 0,
            InputProgram::Steps { low, high, hold } => low.is_finite() && high >= low && hold > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid input program {self:?}")))
        }
    }

    pub fn generate(&self, n: usize, ts: f64, rng: &mut UniformStream) -> Vec<f64> {
        match *self {
            InputProgram::Prbs { amplitude, offset, hold } => {
                let mut level = 0.0;
                (0..n)
                    .map(|k| {
                        if k % hold == 0 {
                            level = if rng.next_f64() < 0.5 { -amplitude } else { amplitude };
                        }
                        offset + level
                    })
                    .collect()
            }
            InputProgram::Multisine {
                amplitude,
                f_max,
                harmonics,
            } => {
                let phases: Vec<f64> = (0..harmonics).map(|_| std::f64::consts::TAU * rng.next_f64()).collect();
                let scale = amplitude / (harmonics as f64).sqrt();
                (0..n)
                    .map(|k| {
                        let t = k as f64 * ts;
                        scale
                            * phases
                                .iter()
                                .enumerate()
                                .map(|(i, p)| {
                                    let f = f_max * (i + 1) as f64 / harmonics as f64;
                                    (std::f64::consts::TAU * f * t + p).sin()
                                })
                                .sum::<f64>()
                    })
                    .collect()
            }
            InputProgram::Steps { low, high, hold } => {
                let mut level = 0.0;
                (0..n)
                    .map(|k| {
                        if k % hold == 0 {
                            level = low + (high - low) * rng.next_f64();
                        }
                        level
                    })
                    .collect()
            }
        }
    }
}

/// Overrides for [`generate`]; `None` keeps the system default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchOptions {
    pub sample_time: Option<f64>,
    /// output noise std as a fraction of the clean output std
    pub noise: Option<f64>,
    pub input: Option<InputProgram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub system: String,
    pub samples: usize,
    pub sample_time: f64,
    pub seed: u64,
    pub noise: f64,
    pub input: InputProgram,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    pub estimation_samples: usize,
    /// regressors of the generating equation, when it is a regression
    pub support: Option<Vec<String>>,
    /// a state hit the nonnegativity clamp
    pub clamped: bool,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub estimation: SignalTable,
    pub validation: SignalTable,
    pub metadata: Metadata,
}

struct Defaults {
    ts: f64,
    noise: f64,
    input: InputProgram,
    nu: usize,
}

fn defaults(system: &str) -> Result<Defaults> {
    let steps = |low, high, hold| InputProgram::Steps { low, high, hold };
    let (ts, noise, input, nu) = match system {
        "two_tank" => (0.2, 0.01, steps(0.5, 1.5, 150), 1),
        "narx_toy" => (1.0, 0.0, steps(-1.0, 1.0, 1), 1),
        "linear_first_order" => (1.0, 0.0, steps(-1.0, 1.0, 10), 1),
        "resonant2" | "wiener2" => (1.0, 0.0, steps(-1.0, 1.0, 5), 1),
        "robot_arm" => (
            0.05,
            0.01,
            InputProgram::Multisine {
                amplitude: 2.0,
                f_max: 3.0,
                harmonics: 30,
            },
            1,
        ),
        "si_engine" => (0.1, 0.01, steps(-1.0, 1.0, 20), 4),
        "ic_engine" => (0.04, 0.01, steps(0.0, 4.0, 50), 1),
        other => return Err(Error::UnknownSystem(other.to_string())),
    };
    Ok(Defaults { ts, noise, input, nu })
}

/// Classical RK4 over one sample with the input held.
fn rk4<F: Fn(&[f64], &[f64], &mut [f64])>(f: &F, x: &mut [f64], u: &[f64], h: f64) {
    let n = x.len();
    let mut k = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut tmp = vec![0.0; n];
    f(x, u, &mut k[0]);
    for (s, c) in [(1, 0.5), (2, 0.5), (3, 1.0)] {
        for i in 0..n {
            tmp[i] = x[i] + c * h * k[s - 1][i];
        }
        f(&tmp, u, &mut k[s]);
    }
    for i in 0..n {
        x[i] += h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
    }
}

pub const TWO_TANK_K: [f64; 4] = [0.5, 0.4, 0.2, 0.3];

fn two_tank_rhs(x: &[f64], u: &[f64], dx: &mut [f64]) {
    let [k1, k2, k3, k4] = TWO_TANK_K;
    let s1 = x[0].max(0.0).sqrt();
    let s2 = x[1].max(0.0).sqrt();
    dx[0] = -k1 * s1 + k4 * u[0];
    dx[1] = k2 * s1 - k3 * s2;
}

/// Two-tank response with `substeps` RK4 steps per sample, starting from
/// the equilibrium of `u[0]`. Returns the output and whether a state was
/// clamped at zero.
pub fn two_tank_response(u: &[f64], ts: f64, substeps: usize) -> (Vec<f64>, bool) {
    let [k1, k2, k3, k4] = TWO_TANK_K;
    let u0 = u.first().copied().unwrap_or(0.0).max(0.0);
    let x1 = (k4 * u0 / k1).powi(2);
    let mut x = vec![x1, (k2 / k3).powi(2) * x1];
    let mut clamped = false;
    let h = ts / substeps as f64;
    let y = u
        .iter()
        .map(|&uk| {
            let y = x[1];
            for _ in 0..substeps {
                rk4(&two_tank_rhs, &mut x, &[uk], h);
                for v in x.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                        clamped = true;
                    }
                }
            }
            y
        })
        .collect();
    (y, clamped)
}

fn continuous<F: Fn(&[f64], &[f64], &mut [f64])>(
    f: F,
    x0: Vec<f64>,
    u: &DMatrix<f64>,
    ts: f64,
    substeps: usize,
    out: impl Fn(&[f64]) -> f64,
) -> Vec<f64> {
    let mut x = x0;
    let h = ts / substeps as f64;
    (0..u.nrows())
        .map(|k| {
            let uk: Vec<f64> = u.row(k).iter().copied().collect();
            let y = out(&x);
            for _ in 0..substeps {
                rk4(&f, &mut x, &uk, h);
            }
            y
        })
        .collect()
}

fn resonant(u: &[f64]) -> Vec<f64> {
    // x(k+1) = A x + B u, w = x1; A = [1.4 1; -0.65 0], B = [0.5; 0.3]
    let mut x = [0.0, 0.0];
    u.iter()
        .map(|&uk| {
            let w = x[0];
            x = [1.4 * x[0] + x[1] + 0.5 * uk, -0.65 * x[0] + 0.3 * uk];
            w
        })
        .collect()
}

fn robot_arm_rhs(x: &[f64], u: &[f64], dx: &mut [f64]) {
    // x = [motor speed, link1 speed, link2 speed, motor-link1 twist, link1-link2 twist]
    const J: [f64; 3] = [1.0, 0.6, 0.4];
    const K: [f64; 2] = [30.0, 20.0];
    const C: [f64; 2] = [0.3, 0.2];
    let t1 = K[0] * x[3] + C[0] * (x[0] - x[1]);
    let t2 = K[1] * x[4] + C[1] * (x[1] - x[2]);
    let friction = 0.5 * x[0] + 0.8 * (20.0 * x[0]).tanh();
    dx[0] = (u[0] - t1 - friction) / J[0];
    dx[1] = (t1 - t2) / J[1];
    dx[2] = t2 / J[2];
    dx[3] = x[0] - x[1];
    dx[4] = x[1] - x[2];
}

fn si_engine_rhs(x: &[f64], u: &[f64], dx: &mut [f64]) {
    let g = u[0] * (1.0 + 0.5 * u[1].tanh()) - 0.3 * u[2] * u[2] + 0.2 * u[3];
    dx[0] = (g - x[0]) / 0.4;
}

fn ic_engine_rhs(x: &[f64], u: &[f64], dx: &mut [f64]) {
    dx[0] = (u[0] - x[0]) / 0.25;
    dx[1] = 6.0 * x[0] / (1.0 + 0.3 * x[0]) - 0.9 * x[1];
}

fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Seeds of the independent random streams.
const INPUT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const NOISE_STREAM: u64 = 0xd1b5_4a32_d192_ed03;
const EQUATION_STREAM: u64 = 0x8cb9_2ba7_2f3d_8dd7;

/// Simulates `system` for `n` samples and splits the record 70/30.
pub fn generate(system: &str, n: usize, seed: u64, opts: &BenchOptions) -> Result<Benchmark> {
    let def = defaults(system)?;
    if n < 100 {
        return Err(Error::InvalidArgument(format!("{n} samples requested; at least 100 needed")));
    }
    let ts = opts.sample_time.unwrap_or(def.ts);
    if !(ts > 0.0) || !ts.is_finite() {
        return Err(Error::InvalidArgument("sample time must be positive".into()));
    }
    let noise = opts.noise.unwrap_or(def.noise);
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::InvalidArgument("noise level must be nonnegative".into()));
    }
    let input = opts.input.clone().unwrap_or(def.input);
    input.validate()?;

    let mut rng = UniformStream::new(seed ^ INPUT_STREAM);
    let mut u = DMatrix::zeros(n, def.nu);
    for c in 0..def.nu {
        u.set_column(c, &nalgebra::DVector::from_vec(input.generate(n, ts, &mut rng)));
    }
    let col = |c: usize| -> Vec<f64> { u.column(c).iter().copied().collect() };
    let mut clamped = false;
    let mut support = None;
    let y: Vec<f64> = match system {
        "two_tank" => {
            let (y, c) = two_tank_response(&col(0), ts, 2);
            clamped = c;
            y
        }
        "narx_toy" => {
            let u = col(0);
            let mut e = UniformStream::new(seed ^ EQUATION_STREAM);
            let mut y = vec![0.0; n];
            for t in 2..n {
                y[t] = 0.5 * y[t - 1] + 0.8 * u[t - 1] + 0.1 * y[t - 1] * u[t - 2] + 0.05 * e.normal();
            }
            support = Some(vec!["y1(t-1)".to_string(), "u1(t-1)".to_string(), "y1(t-1)*u1(t-2)".to_string()]);
            y
        }
        "linear_first_order" => {
            let mut x = 0.0;
            col(0)
                .iter()
                .map(|&uk| {
                    let y = x;
                    x = 0.9 * x + 0.1 * uk;
                    y
                })
                .collect()
        }
        "resonant2" => resonant(&col(0)),
        "wiener2" => resonant(&col(0)).into_iter().map(f64::tanh).collect(),
        "robot_arm" => continuous(robot_arm_rhs, vec![0.0; 5], &u, ts, 4, |x| x[0]),
        "si_engine" => continuous(si_engine_rhs, vec![0.0], &u, ts, 1, |x| x[0]),
        "ic_engine" => continuous(ic_engine_rhs, vec![0.0, 0.0], &u, ts, 1, |x| x[1]),
        _ => unreachable!("checked by defaults"),
    };
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { step: y.iter().position(|v| !v.is_finite()).unwrap_or(0), segment: None });
    }
    let mut y = y;
    if noise > 0.0 {
        let sigma = noise * population_std(&y);
        let mut rng = UniformStream::new(seed ^ NOISE_STREAM);
        for v in y.iter_mut() {
            *v += sigma * rng.normal();
        }
    }
    let input_names: Vec<String> = (1..=def.nu).map(|i| format!("u{i}")).collect();
    let output_names = vec!["y1".to_string()];
    let table = SignalTable::new(
        u,
        DMatrix::from_vec(n, 1, y),
        ts,
        0.0,
        input_names.clone(),
        output_names.clone(),
    )?;
    let n_est = n * 7 / 10;
    Ok(Benchmark {
        estimation: table.slice(0, n_est)?,
        validation: table.slice(n_est, n - n_est)?,
        metadata: Metadata {
            system: system.to_string(),
            samples: n,
            sample_time: ts,
            seed,
            noise,
            input,
            input_names,
            output_names,
            estimation_samples: n_est,
            support,
            clamped,
        },
    })
}

/// Replaces the outputs of `data` by `lags` delayed copies of output
/// channel `channel`: `y(t), y(t-1), ..., y(t-lags+1)`. The first
/// `lags - 1` samples are dropped.
pub fn lag_embedding(data: &SignalTable, channel: usize, lags: usize) -> Result<SignalTable> {
    if lags == 0 || lags > data.len() || channel >= data.num_outputs() {
        return Err(Error::InvalidArgument(format!(
            "cannot embed {lags} lags of output {channel} in {} samples",
            data.len()
        )));
    }
    let n = data.len() - (lags - 1);
    let y = data.outputs();
    let emb = DMatrix::from_fn(n, lags, |t, j| y[(t + lags - 1 - j, channel)]);
    let u = data.inputs().rows(lags - 1, n).into_owned();
    let base = &data.output_names()[channel];
    let names = (0..lags).map(|j| if j == 0 { base.clone() } else { format!("{base}_lag{j}") }).collect();
    SignalTable::new(
        u,
        emb,
        data.sample_time(),
        data.time(lags - 1),
        data.input_names().to_vec(),
        names,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_system_generates() {
        for s in SYSTEMS {
            let b = generate(s, 400, 3, &BenchOptions::default()).unwrap();
            assert_eq!(b.estimation.len(), 280);
            assert_eq!(b.validation.len(), 120);
            assert_eq!(b.validation.start_time(), 280.0 * b.metadata.sample_time);
            assert!(!b.metadata.clamped, "{s}");
            assert!(population_std(b.estimation.outputs().as_slice()) > 1e-3, "{s}");
        }
    }

    #[test]
    fn unknown_system() {
        assert!(matches!(generate("three_tank", 400, 0, &BenchOptions::default()), Err(Error::UnknownSystem(_))));
        assert!(generate("two_tank", 99, 0, &BenchOptions::default()).is_err());
    }

    #[test]
    fn deterministic() {
        for s in SYSTEMS {
            let opts = BenchOptions {
                noise: Some(0.0),
                ..Default::default()
            };
            let a = generate(s, 300, 9, &opts).unwrap();
            let b = generate(s, 300, 9, &opts).unwrap();
            assert_eq!(a.estimation.outputs(), b.estimation.outputs());
            assert_eq!(a.estimation.inputs(), b.estimation.inputs());
        }
    }

    #[test]
    fn two_tank_step_halving() {
        let b = generate(
            "two_tank",
            3000,
            1,
            &BenchOptions {
                noise: Some(0.0),
                ..Default::default()
            },
        )
        .unwrap();
        let u: Vec<f64> = (0..3000).map(|k| if k < 2100 { b.estimation.inputs()[(k, 0)] } else { b.validation.inputs()[(k - 2100, 0)] }).collect();
        let (fine, _) = two_tank_response(&u, 0.2, 4);
        let worst = b
            .estimation
            .outputs()
            .iter()
            .chain(b.validation.outputs().iter())
            .zip(&fine)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn narx_toy_support() {
        let b = generate("narx_toy", 500, 2, &BenchOptions::default()).unwrap();
        assert_eq!(b.metadata.support.as_ref().unwrap().len(), 3);
    }

    #[test]
    fn embedding_shifts() {
        let b = generate("two_tank", 200, 1, &BenchOptions::default()).unwrap();
        let e = lag_embedding(&b.estimation, 0, 20).unwrap();
        assert_eq!(e.num_outputs(), 20);
        assert_eq!(e.len(), 140 - 19);
        assert_eq!(e.outputs()[(5, 3)], b.estimation.outputs()[(5 + 19 - 3, 0)]);
    }
}
