//! Intersample interpolation of sampled inputs: zero-order hold, linear
//! (first-order hold) and shape-preserving piecewise cubic Hermite (PCHIP,
//! Fritsch-Carlson slopes).

use crate::error::{Error, Result};
use crate::signal_data::Intersample;

/// Monotone piecewise cubic Hermite interpolant.
#[derive(Debug, Clone, PartialEq)]
pub struct Pchip {
    t: Vec<f64>,
    v: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    pub fn new(t: &[f64], v: &[f64]) -> Result<Self> {
        if t.len() != v.len() {
            return Err(Error::DimensionMismatch("knot times and values differ in length".into()));
        }
        if t.len() < 2 {
            return Err(Error::InvalidArgument("pchip needs at least two knots".into()));
        }
        if t.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("knot times must be strictly increasing".into()));
        }
        let d = slopes(t, v);
        Ok(Self {
            t: t.to_vec(),
            v: v.to_vec(),
            d,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.t
    }

    pub fn derivatives(&self) -> &[f64] {
        &self.d
    }

    /// Value at `q`; queries outside the knot range are refused.
    pub fn eval(&self, q: f64) -> Result<f64> {
        let n = self.t.len();
        if !(q >= self.t[0] && q <= self.t[n - 1]) {
            return Err(Error::InvalidArgument(format!(
                "query {q} outside [{}, {}]",
                self.t[0],
                self.t[n - 1]
            )));
        }
        let k = match self.t.binary_search_by(|x| x.partial_cmp(&q).expect("finite knots")) {
            Ok(i) => return Ok(self.v[i]),
            Err(i) => i - 1,
        };
        let h = self.t[k + 1] - self.t[k];
        Ok(self.eval_interval(k, (q - self.t[k]) / h))
    }

    /// Value on interval `k` at fraction `s` in `[0, 1]`.
    pub fn eval_interval(&self, k: usize, s: f64) -> f64 {
        let h = self.t[k + 1] - self.t[k];
        hermite(self.v[k], self.v[k + 1], self.d[k] * h, self.d[k + 1] * h, s)
    }
}

fn hermite(y0: f64, y1: f64, m0: f64, m1: f64, s: f64) -> f64 {
    let s2 = s * s;
    let s3 = s2 * s;
    (2.0 * s3 - 3.0 * s2 + 1.0) * y0 + (s3 - 2.0 * s2 + s) * m0 + (-2.0 * s3 + 3.0 * s2) * y1 + (s3 - s2) * m1
}

fn slopes(t: &[f64], v: &[f64]) -> Vec<f64> {
    let n = t.len();
    let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    let del: Vec<f64> = (0..n - 1).map(|k| (v[k + 1] - v[k]) / h[k]).collect();
    if n == 2 {
        return vec![del[0], del[0]];
    }
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        if del[k - 1] * del[k] > 0.0 {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / del[k - 1] + w2 / del[k]);
        }
    }
    d[0] = end_slope(h[0], h[1], del[0], del[1]);
    d[n - 1] = end_slope(h[n - 2], h[n - 3], del[n - 2], del[n - 3]);
    d
}

/// Shape-preserving three-point end condition.
fn end_slope(h0: f64, h1: f64, del0: f64, del1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * del0 - h0 * del1) / (h0 + h1);
    if d.signum() != del0.signum() || del0 == 0.0 {
        0.0
    } else if del0.signum() != del1.signum() && d.abs() > (3.0 * del0).abs() {
        3.0 * del0
    } else {
        d
    }
}

pub fn pchip_interpolate(t: &[f64], v: &[f64], q: f64) -> Result<f64> {
    Pchip::new(t, v)?.eval(q)
}

/// Uniformly sampled channels evaluated between samples according to an
/// intersample rule.
#[derive(Debug, Clone)]
pub struct SampledInput {
    /// per channel samples
    samples: Vec<Vec<f64>>,
    rules: Vec<Intersample>,
    pchip: Vec<Option<Pchip>>,
}

impl SampledInput {
    /// `rules` holds one entry per channel.
    pub fn new(samples: Vec<Vec<f64>>, rules: Vec<Intersample>) -> Result<Self> {
        if rules.len() != samples.len() {
            return Err(Error::DimensionMismatch("one intersample rule per channel".into()));
        }
        let pchip = samples
            .iter()
            .zip(&rules)
            .map(|(s, &rule)| {
                if rule == Intersample::Pchip && s.len() >= 2 {
                    let t: Vec<f64> = (0..s.len()).map(|k| k as f64).collect();
                    Pchip::new(&t, s).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            rules,
            pchip,
        })
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    /// Channel values on sample interval `k` at fraction `s` in `[0, 1]`.
    pub fn at(&self, k: usize, s: f64, out: &mut Vec<f64>) {
        out.clear();
        for (c, x) in self.samples.iter().enumerate() {
            let last = x.len() - 1;
            let v = if k >= last {
                x[last]
            } else {
                match self.rules[c] {
                    Intersample::Zoh => x[k],
                    Intersample::Foh => (1.0 - s) * x[k] + s * x[k + 1],
                    Intersample::Pchip => match &self.pchip[c] {
                        Some(p) => p.eval_interval(k, s),
                        None => x[k],
                    },
                }
            };
            out.push(v);
        }
    }
}
