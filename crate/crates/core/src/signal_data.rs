//! Uniformly sampled input/output records: construction, CSV ingestion,
//! z-score normalization, segmentation into experiments, and the NRMSE fit
//! score used to compare models against measurements.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt_num;

/// Assumed signal shape between samples of an input channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intersample {
    #[default]
    Zoh,
    Foh,
    Pchip,
}

/// Multi-channel input/output record on a uniform time grid.
///
/// Row `k` is sampled at `start_time + k * sample_time`. The table is
/// immutable once built; derived tables are new values.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalTable {
    inputs: DMatrix<f64>,
    outputs: DMatrix<f64>,
    sample_time: f64,
    start_time: f64,
    input_names: Vec<String>,
    output_names: Vec<String>,
    intersample: Vec<Intersample>,
}

impl SignalTable {
    /// Builds a table from an `N x nu` input matrix and an `N x ny` output
    /// matrix with default channel names `u1..`, `y1..`.
    pub fn from_matrices(
        inputs: DMatrix<f64>,
        outputs: DMatrix<f64>,
        sample_time: f64,
        start_time: f64,
    ) -> Result<Self> {
        let input_names = (1..=inputs.ncols()).map(|i| format!("u{i}")).collect();
        let output_names = (1..=outputs.ncols()).map(|i| format!("y{i}")).collect();
        Self::new(inputs, outputs, sample_time, start_time, input_names, output_names)
    }

    pub fn new(
        inputs: DMatrix<f64>,
        outputs: DMatrix<f64>,
        sample_time: f64,
        start_time: f64,
        input_names: Vec<String>,
        output_names: Vec<String>,
    ) -> Result<Self> {
        if inputs.nrows() != outputs.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "inputs have {} rows, outputs have {}",
                inputs.nrows(),
                outputs.nrows()
            )));
        }
        if outputs.nrows() == 0 {
            return Err(Error::InvalidArgument("a table needs at least one row".into()));
        }
        if !(sample_time > 0.0 && sample_time.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sample time must be positive, got {sample_time}"
            )));
        }
        if !start_time.is_finite() {
            return Err(Error::InvalidArgument("start time must be finite".into()));
        }
        if input_names.len() != inputs.ncols() || output_names.len() != outputs.ncols() {
            return Err(Error::DimensionMismatch(
                "channel name count does not match column count".into(),
            ));
        }
        check_finite(&inputs, 0)?;
        check_finite(&outputs, inputs.ncols())?;
        let mut seen = HashSet::new();
        for name in input_names.iter().chain(&output_names) {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate channel name '{name}'")));
            }
        }
        let intersample = vec![Intersample::Zoh; inputs.ncols()];
        Ok(Self {
            inputs,
            outputs,
            sample_time,
            start_time,
            input_names,
            output_names,
            intersample,
        })
    }

    pub fn with_intersample(mut self, intersample: Intersample) -> Self {
        self.intersample = vec![intersample; self.inputs.ncols()];
        self
    }

    pub fn len(&self) -> usize {
        self.outputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn num_outputs(&self) -> usize {
        self.outputs.ncols()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn outputs(&self) -> &DMatrix<f64> {
        &self.outputs
    }

    pub fn sample_time(&self) -> f64 {
        self.sample_time
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    pub fn time(&self, row: usize) -> f64 {
        self.start_time + row as f64 * self.sample_time
    }

    pub fn input_names(&self) -> &[String] {
        &self.input_names
    }

    pub fn output_names(&self) -> &[String] {
        &self.output_names
    }

    pub fn intersample(&self) -> &[Intersample] {
        &self.intersample
    }

    /// Column of the named channel, searching outputs first.
    pub fn channel(&self, name: &str) -> Option<Vec<f64>> {
        if let Some(j) = self.output_names.iter().position(|n| n == name) {
            return Some(self.outputs.column(j).iter().copied().collect());
        }
        self.input_names
            .iter()
            .position(|n| n == name)
            .map(|j| self.inputs.column(j).iter().copied().collect())
    }

    /// Contiguous slice of `len` rows starting at `start`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.len() {
            return Err(Error::InvalidArgument(format!(
                "rows {start}..{} out of range for {} samples",
                start + len,
                self.len()
            )));
        }
        Ok(Self {
            inputs: self.inputs.rows(start, len).into_owned(),
            outputs: self.outputs.rows(start, len).into_owned(),
            sample_time: self.sample_time,
            start_time: self.time(start),
            input_names: self.input_names.clone(),
            output_names: self.output_names.clone(),
            intersample: self.intersample.clone(),
        })
    }

    /// Same grid and names with replaced signal values.
    pub fn with_values(&self, inputs: DMatrix<f64>, outputs: DMatrix<f64>) -> Result<Self> {
        let mut t = Self::new(
            inputs,
            outputs,
            self.sample_time,
            self.start_time,
            self.input_names.clone(),
            self.output_names.clone(),
        )?;
        t.intersample = self.intersample.clone();
        Ok(t)
    }

    /// Writes the table as CSV: leading `t` column, inputs, then outputs.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv_to(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend(self.input_names.iter().cloned());
        header.extend(self.output_names.iter().cloned());
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut row = vec![fmt_num(self.time(k))];
            row.extend(self.inputs.row(k).iter().map(|&v| fmt_num(v)));
            row.extend(self.outputs.row(k).iter().map(|&v| fmt_num(v)));
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()
    }
}

fn check_finite(m: &DMatrix<f64>, col_offset: usize) -> Result<()> {
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            if !m[(r, c)].is_finite() {
                return Err(Error::NonFinite {
                    row: r,
                    col: c + col_offset,
                });
            }
        }
    }
    Ok(())
}

/// Column selection for [`read_csv`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    #[serde(default)]
    pub time_column: Option<String>,
    /// Required when there is no time column; overrides the inferred value otherwise.
    #[serde(default)]
    pub sample_time: Option<f64>,
}

pub fn read_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<SignalTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv_from(file, schema)
}

pub fn read_csv_from(reader: impl std::io::Read, schema: &CsvSchema) -> Result<SignalTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let in_idx = schema.input_names.iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;
    let out_idx = schema.output_names.iter().map(|n| find(n)).collect::<Result<Vec<_>>>()?;
    let t_idx = schema.time_column.as_deref().map(find).transpose()?;

    let parse = |rec: &csv::StringRecord, row: usize, col: usize| -> Result<f64> {
        let cell = rec.get(col).unwrap_or("");
        cell.parse::<f64>().map_err(|_| Error::Parse {
            row,
            column: headers[col].clone(),
            cell: cell.to_string(),
        })
    };

    let mut times = Vec::new();
    let mut u = Vec::new();
    let mut y = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if let Some(ti) = t_idx {
            times.push(parse(&rec, row, ti)?);
        }
        for &c in &in_idx {
            u.push(parse(&rec, row, c)?);
        }
        for &c in &out_idx {
            y.push(parse(&rec, row, c)?);
        }
    }
    let n = if in_idx.is_empty() && out_idx.is_empty() {
        times.len()
    } else {
        (u.len() + y.len()) / (in_idx.len() + out_idx.len())
    };
    if n == 0 {
        return Err(Error::InvalidArgument("CSV has no data rows".into()));
    }

    let (sample_time, start_time) = match (t_idx, schema.sample_time) {
        (Some(_), explicit) => {
            let ts = match explicit {
                Some(ts) => ts,
                None if times.len() >= 2 => infer_sample_time(&times),
                None => {
                    return Err(Error::InvalidArgument(
                        "a single-row file needs an explicit sample time".into(),
                    ))
                }
            };
            check_uniform(&times, ts)?;
            (ts, times[0])
        }
        (None, Some(ts)) => (ts, 0.0),
        (None, None) => {
            return Err(Error::InvalidArgument(
                "either a time column or a sample time is required".into(),
            ))
        }
    };

    let inputs = DMatrix::from_row_slice(n, in_idx.len(), &u);
    let outputs = DMatrix::from_row_slice(n, out_idx.len(), &y);
    SignalTable::new(
        inputs,
        outputs,
        sample_time,
        start_time,
        schema.input_names.clone(),
        schema.output_names.clone(),
    )
}

/// Picks the sample time that best reproduces the recorded grid as
/// `t0 + k * ts`: candidates are the averaged spacing, its nearby floats,
/// and its short decimal roundings. Ties go to the shortest decimal.
fn infer_sample_time(times: &[f64]) -> f64 {
    let n = times.len();
    let t0 = times[0];
    let est = (times[n - 1] - t0) / (n - 1) as f64;
    if !(est > 0.0 && est.is_finite()) {
        return est;
    }
    let mut candidates = vec![est];
    let mut up = est;
    let mut down = est;
    for _ in 0..8 {
        up = up.next_up();
        down = down.next_down();
        candidates.push(up);
        candidates.push(down);
    }
    for digits in 1..=17 {
        if let Ok(v) = format!("{:.*e}", digits - 1, est).parse::<f64>() {
            if v > 0.0 {
                candidates.push(v);
            }
        }
    }
    let score = |ts: f64| -> (usize, f64) {
        let mut exact = 0;
        let mut worst: f64 = 0.0;
        for (k, &t) in times.iter().enumerate() {
            let g = t0 + k as f64 * ts;
            if g == t {
                exact += 1;
            }
            worst = worst.max((g - t).abs());
        }
        (exact, worst)
    };
    let repr_len = |v: f64| format!("{v:e}").len();
    let mut best = est;
    let mut best_score = score(est);
    for &c in &candidates[1..] {
        let s = score(c);
        let better = s.0 > best_score.0
            || (s.0 == best_score.0 && s.1 < best_score.1)
            || (s.0 == best_score.0 && s.1 == best_score.1 && repr_len(c) < repr_len(best));
        if better {
            best = c;
            best_score = s;
        }
    }
    best
}

fn check_uniform(times: &[f64], ts: f64) -> Result<()> {
    if !(ts > 0.0) {
        return Err(Error::NonUniformSampling { row: 1 });
    }
    let t0 = times[0];
    for (k, &t) in times.iter().enumerate() {
        if ((t0 + k as f64 * ts) - t).abs() > 1e-9 * ts {
            return Err(Error::NonUniformSampling { row: k });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationMethod {
    #[default]
    None,
    Zscore,
}

/// Per-channel affine scaling `x_n = (x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScaling {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelScaling {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    /// Population statistics (divisor N) of each column.
    pub fn fit(columns: &DMatrix<f64>, names: &[String]) -> Result<Self> {
        let n = columns.nrows() as f64;
        let mut mean = Vec::with_capacity(columns.ncols());
        let mut std = Vec::with_capacity(columns.ncols());
        for (j, col) in columns.column_iter().enumerate() {
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let s = var.sqrt();
            if !(s > 1e-300 * m.abs().max(1.0)) || s <= f64::EPSILON * m.abs() * 4.0 {
                let name = names.get(j).cloned().unwrap_or_else(|| format!("#{j}"));
                return Err(Error::ConstantChannel(name));
            }
            mean.push(m);
            std.push(s);
        }
        Ok(Self { mean, std })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    #[inline]
    pub fn forward(&self, ch: usize, v: f64) -> f64 {
        (v - self.mean[ch]) / self.std[ch]
    }

    #[inline]
    pub fn inverse(&self, ch: usize, v: f64) -> f64 {
        v * self.std[ch] + self.mean[ch]
    }

    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| self.forward(c, m[(r, c)]))
    }

    pub fn invert(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| self.inverse(c, m[(r, c)]))
    }

    pub fn is_identity(&self) -> bool {
        self.mean.iter().all(|&m| m == 0.0) && self.std.iter().all(|&s| s == 1.0)
    }
}

/// Stored inverse transform for a normalized table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationState {
    pub method: NormalizationMethod,
    pub inputs: ChannelScaling,
    pub outputs: ChannelScaling,
}

impl NormalizationState {
    pub fn identity(nu: usize, ny: usize) -> Self {
        Self {
            method: NormalizationMethod::None,
            inputs: ChannelScaling::identity(nu),
            outputs: ChannelScaling::identity(ny),
        }
    }

    /// Fits the statistics on `data` without transforming it.
    pub fn fit(data: &SignalTable, method: NormalizationMethod) -> Result<Self> {
        match method {
            NormalizationMethod::None => Ok(Self::identity(data.num_inputs(), data.num_outputs())),
            NormalizationMethod::Zscore => Ok(Self {
                method,
                inputs: ChannelScaling::fit(data.inputs(), data.input_names())?,
                outputs: ChannelScaling::fit(data.outputs(), data.output_names())?,
            }),
        }
    }

    /// Fits on the concatenation of several tables sharing channels.
    pub fn fit_many(data: &[SignalTable], method: NormalizationMethod) -> Result<Self> {
        let first = data
            .first()
            .ok_or_else(|| Error::InvalidArgument("no data to normalize".into()))?;
        if data.len() == 1 {
            return Self::fit(first, method);
        }
        let pooled = concat(data)?;
        Self::fit(&pooled, method)
    }

    pub fn apply(&self, data: &SignalTable) -> Result<SignalTable> {
        data.with_values(self.inputs.apply(data.inputs()), self.outputs.apply(data.outputs()))
    }

    pub fn invert(&self, data: &SignalTable) -> Result<SignalTable> {
        data.with_values(self.inputs.invert(data.inputs()), self.outputs.invert(data.outputs()))
    }
}

/// Normalizes every channel of `data`; the returned state inverts it.
pub fn normalize(
    data: &SignalTable,
    method: NormalizationMethod,
) -> Result<(SignalTable, NormalizationState)> {
    let state = NormalizationState::fit(data, method)?;
    Ok((state.apply(data)?, state))
}

/// Stacks tables row-wise (used for pooling statistics across segments).
pub fn concat(data: &[SignalTable]) -> Result<SignalTable> {
    let first = data
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
    let n: usize = data.iter().map(SignalTable::len).sum();
    let mut u = DMatrix::zeros(n, first.num_inputs());
    let mut y = DMatrix::zeros(n, first.num_outputs());
    let mut r = 0;
    for t in data {
        if t.num_inputs() != first.num_inputs() || t.num_outputs() != first.num_outputs() {
            return Err(Error::DimensionMismatch("tables have different channel counts".into()));
        }
        u.rows_mut(r, t.len()).copy_from(t.inputs());
        y.rows_mut(r, t.len()).copy_from(t.outputs());
        r += t.len();
    }
    first.with_values(u, y)
}

/// Equal-length experiments cut from one record.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSet {
    pub segments: Vec<SignalTable>,
    pub frame_size: usize,
    pub frame_rate: usize,
}

impl SegmentSet {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn as_slice(&self) -> &[SignalTable] {
        &self.segments
    }
}

/// Frames of `frame_size` rows starting every `frame_rate` rows; a trailing
/// partial frame is dropped.
pub fn segment(data: &SignalTable, frame_size: usize, frame_rate: usize) -> Result<SegmentSet> {
    if frame_size == 0 || frame_rate == 0 {
        return Err(Error::InvalidArgument("frame size and rate must be at least 1".into()));
    }
    if frame_size > data.len() {
        return Err(Error::InvalidArgument(format!(
            "frame size {frame_size} exceeds {} samples",
            data.len()
        )));
    }
    let count = (data.len() - frame_size) / frame_rate + 1;
    let segments = (0..count)
        .map(|i| data.slice(i * frame_rate, frame_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(SegmentSet {
        segments,
        frame_size,
        frame_rate,
    })
}

/// NRMSE fit per channel: `100 * (1 - |y - y_model| / |y - mean(y)|)`.
pub fn fit_percent(measured: &DMatrix<f64>, model: &DMatrix<f64>) -> Result<Vec<f64>> {
    if measured.shape() != model.shape() {
        return Err(Error::DimensionMismatch(format!(
            "measured {:?} vs model {:?}",
            measured.shape(),
            model.shape()
        )));
    }
    if measured.nrows() < 2 {
        return Err(Error::InvalidArgument("fit needs at least two samples".into()));
    }
    measured
        .column_iter()
        .zip(model.column_iter())
        .enumerate()
        .map(|(j, (y, yh))| {
            let mean = y.mean();
            let num = y.iter().zip(yh.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let den = y.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>().sqrt();
            if den == 0.0 {
                return Err(Error::ConstantChannel(format!("output {}", j + 1)));
            }
            Ok(100.0 * (1.0 - num / den))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn default_names_for_matrix_pair() {
        let t = SignalTable::from_matrices(DMatrix::zeros(100, 2), DMatrix::zeros(100, 3), 0.1, 0.0)
            .unwrap();
        assert_eq!(t.input_names(), ["u1", "u2"]);
        assert_eq!(t.output_names(), ["y1", "y2", "y3"]);
        assert_eq!(t.intersample(), [Intersample::Zoh; 2]);
    }

    #[test]
    fn single_row_table() {
        let t = SignalTable::from_matrices(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1), 1.0, 0.0)
            .unwrap();
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn rejects_nan_and_bad_shapes() {
        let mut u = DMatrix::zeros(3, 1);
        u[(1, 0)] = f64::NAN;
        let err = SignalTable::from_matrices(u, DMatrix::zeros(3, 1), 1.0, 0.0).unwrap_err();
        assert_eq!(err.to_string(), "non-finite entry at (1,0)");
        assert!(SignalTable::from_matrices(DMatrix::zeros(3, 1), DMatrix::zeros(4, 1), 1.0, 0.0)
            .is_err());
        assert!(SignalTable::from_matrices(DMatrix::zeros(3, 1), DMatrix::zeros(3, 1), 0.0, 0.0)
            .is_err());
    }

    #[test]
    fn csv_time_grid() {
        let schema = CsvSchema {
            input_names: vec![],
            output_names: vec!["y".into()],
            time_column: Some("t".into()),
            sample_time: None,
        };
        let t = read_csv_from("t,y\n0,1\n0.1,2\n0.2,3\n".as_bytes(), &schema).unwrap();
        assert_eq!(t.sample_time(), 0.1);
        let err = read_csv_from("t,y\n0,1\n0.1,2\n0.25,3\n".as_bytes(), &schema).unwrap_err();
        assert!(err.to_string().contains("non-uniform sampling"));
    }

    #[test]
    fn csv_errors() {
        let schema = CsvSchema {
            input_names: vec!["u".into()],
            output_names: vec!["y".into()],
            time_column: None,
            sample_time: Some(1.0),
        };
        assert!(matches!(
            read_csv_from("u,z\n1,2\n".as_bytes(), &schema),
            Err(Error::MissingColumn(c)) if c == "y"
        ));
        assert!(matches!(
            read_csv_from("u,y\n1,abc\n".as_bytes(), &schema),
            Err(Error::Parse { row: 0, .. })
        ));
    }

    #[test]
    fn zscore_uses_population_std() {
        let t = SignalTable::from_matrices(col(&[1.0, 2.0, 3.0]), col(&[0.0, 1.0, 5.0]), 1.0, 0.0)
            .unwrap();
        let (n, s) = normalize(&t, NormalizationMethod::Zscore).unwrap();
        let expected = 1.5f64.sqrt();
        assert_relative_eq!(n.inputs()[(0, 0)], -expected, epsilon = 1e-12);
        assert_relative_eq!(n.inputs()[(1, 0)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(n.inputs()[(2, 0)], expected, epsilon = 1e-12);
        assert_relative_eq!(s.inputs.mean[0], 2.0);
        assert_relative_eq!(s.inputs.std[0], (2.0f64 / 3.0).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn normalize_none_is_identity() {
        let t = SignalTable::from_matrices(col(&[1.0, 2.0]), col(&[3.0, 4.0]), 1.0, 0.0).unwrap();
        let (n, s) = normalize(&t, NormalizationMethod::None).unwrap();
        assert_eq!(n, t);
        assert_eq!(s.inputs.mean, vec![0.0]);
        assert_eq!(s.outputs.std, vec![1.0]);
    }

    #[test]
    fn constant_channel_rejected() {
        let t = SignalTable::from_matrices(col(&[5.0, 5.0, 5.0]), col(&[1.0, 2.0, 3.0]), 1.0, 0.0)
            .unwrap();
        assert!(matches!(
            normalize(&t, NormalizationMethod::Zscore),
            Err(Error::ConstantChannel(c)) if c == "u1"
        ));
    }

    #[test]
    fn segment_counts() {
        let mk = |n: usize| {
            let v: Vec<f64> = (0..n).map(|i| i as f64).collect();
            SignalTable::from_matrices(col(&v), col(&v), 1.0, 0.0).unwrap()
        };
        assert_eq!(segment(&mk(1000), 500, 500).unwrap().len(), 2);
        let one = segment(&mk(100), 100, 100).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.segments[0], mk(100));
        let s = segment(&mk(55), 20, 20).unwrap();
        // brute-force enumeration of admissible frame starts
        let starts: Vec<usize> = (0..55).step_by(20).filter(|&s| s + 20 <= 55).collect();
        assert_eq!(starts, vec![0, 20]);
        assert_eq!(s.len(), starts.len());
        assert_eq!(s.segments[1].outputs()[(0, 0)], 20.0);
        assert_eq!(s.segments[1].start_time(), 20.0);
        assert!(segment(&mk(10), 11, 1).is_err());
        assert_eq!(segment(&mk(7), 1, 1).unwrap().len(), 7);
    }

    #[test]
    fn fit_percent_reference_values() {
        let y = col(&[0.0, 1.0, 2.0, 3.0]);
        assert_relative_eq!(fit_percent(&y, &y).unwrap()[0], 100.0);
        assert_relative_eq!(fit_percent(&y, &col(&[1.5; 4])).unwrap()[0], 0.0, epsilon = 1e-12);
        let f = fit_percent(&y, &col(&[0.0; 4])).unwrap()[0];
        assert_relative_eq!(f, 100.0 * (1.0 - 14f64.sqrt() / 5f64.sqrt()), epsilon = 1e-12);
        assert_relative_eq!(f, -67.332, epsilon = 1e-3);
        assert!(fit_percent(&col(&[1.0; 3]), &col(&[1.0; 3])).is_err());
    }
}
