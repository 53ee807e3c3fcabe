//! CSV ingestion, fixed benchmark partitions, sliding windows, and
//! per-instance normalization.

use std::fmt;
use std::path::Path;

use crate::{Error, Result};

/// Clamp applied to per-channel standard deviations.
pub const NORM_EPS: f64 = 1e-5;

/// A dense T×c series in time order. Immutable after construction.
#[derive(Debug, Clone)]
pub struct MultivariateSeries {
    timestamps: Vec<String>,
    channel_names: Vec<String>,
    /// Row-major T×c.
    values: Vec<f64>,
}

impl MultivariateSeries {
    /// Validates lengths, finiteness, and strictly increasing timestamps.
    pub fn from_parts(
        timestamps: Vec<String>,
        channel_names: Vec<String>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let (t, c) = (timestamps.len(), channel_names.len());
        if c == 0 {
            return Err(Error::Data("series needs at least one channel".into()));
        }
        if values.len() != t * c {
            return Err(Error::Data(format!(
                "value matrix has {} cells, expected {t}x{c}",
                values.len()
            )));
        }
        for w in timestamps.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Data(format!(
                    "timestamps not strictly increasing: {:?} then {:?}",
                    w[0], w[1]
                )));
            }
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at row {}, channel {}",
                i / c + 1,
                i % c
            )));
        }
        Ok(Self {
            timestamps,
            channel_names,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn timestamps(&self) -> &[String] {
        &self.timestamps
    }

    /// Row-major T×c backing slice.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let c = self.channels();
        &self.values[t * c..(t + 1) * c]
    }

    fn slice(&self, start: usize, len: usize) -> Self {
        let c = self.channels();
        Self {
            timestamps: self.timestamps[start..start + len].to_vec(),
            channel_names: self.channel_names.clone(),
            values: self.values[start * c..(start + len) * c].to_vec(),
        }
    }
}

/// Reads a comma-separated file whose first column is named `date`; every
/// other column must parse as a float. Errors carry the offending file line.
pub fn load_csv(path: &Path) -> Result<MultivariateSeries> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    if headers.is_empty() || headers.get(0) != Some("date") {
        return Err(Error::Data(format!(
            "{}: first column must be named \"date\", found {:?}",
            path.display(),
            headers.get(0).unwrap_or("")
        )));
    }
    if headers.len() < 2 {
        return Err(Error::Data(format!(
            "{}: no value columns after \"date\"",
            path.display()
        )));
    }
    let channel_names: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
    let c = channel_names.len();

    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or(timestamps.len() as u64 + 2);
        let ts = record.get(0).unwrap_or("").to_owned();
        if let Some(prev) = timestamps.last() {
            if &ts <= prev {
                return Err(Error::Data(format!(
                    "{} line {line}: timestamp {ts:?} not after {prev:?}",
                    path.display()
                )));
            }
        }
        for (col, field) in record.iter().skip(1).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "{} line {line}: column {:?} has non-numeric cell {field:?}",
                    path.display(),
                    channel_names[col]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "{} line {line}: column {:?} has non-finite value",
                    path.display(),
                    channel_names[col]
                )));
            }
            values.push(v);
        }
        timestamps.push(ts);
    }
    if timestamps.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    debug_assert_eq!(values.len(), timestamps.len() * c);
    MultivariateSeries::from_parts(timestamps, channel_names, values)
}

/// Row counts for the contiguous train/val/test prefix partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.train, self.val, self.test)
    }
}

/// A benchmark dataset registered by name.
#[derive(Debug, Clone, Copy)]
pub struct DatasetSpec {
    pub name: &'static str,
    pub file: &'static str,
    pub channels: usize,
    pub split: SplitSpec,
}

/// Registered benchmark datasets. Splits are fixed row counts, not ratios.
pub const DATASETS: &[DatasetSpec] = &[
    DatasetSpec {
        name: "etth1",
        file: "ETTh1.csv",
        channels: 7,
        split: SplitSpec { train: 8545, val: 2881, test: 2881 },
    },
    DatasetSpec {
        name: "etth2",
        file: "ETTh2.csv",
        channels: 7,
        split: SplitSpec { train: 8545, val: 2881, test: 2881 },
    },
    DatasetSpec {
        name: "ettm1",
        file: "ETTm1.csv",
        channels: 7,
        split: SplitSpec { train: 34465, val: 11521, test: 11521 },
    },
    DatasetSpec {
        name: "ettm2",
        file: "ETTm2.csv",
        channels: 7,
        split: SplitSpec { train: 34465, val: 11521, test: 11521 },
    },
    DatasetSpec {
        name: "weather",
        file: "weather.csv",
        channels: 21,
        split: SplitSpec { train: 36792, val: 5271, test: 10540 },
    },
];

pub fn dataset_spec(name: &str) -> Result<&'static DatasetSpec> {
    DATASETS.iter().find(|d| d.name == name).ok_or_else(|| {
        let names: Vec<_> = DATASETS.iter().map(|d| d.name).collect();
        Error::Config(format!(
            "unknown dataset {name:?}; registered: {}",
            names.join(", ")
        ))
    })
}

/// Cuts the first `train + val + test` rows into three contiguous pieces.
pub fn split(
    series: &MultivariateSeries,
    spec: SplitSpec,
) -> Result<(MultivariateSeries, MultivariateSeries, MultivariateSeries)> {
    let need = spec.train + spec.val + spec.test;
    if need > series.len() {
        return Err(Error::Data(format!(
            "split {spec} needs {need} rows, series has {}",
            series.len()
        )));
    }
    if spec.train == 0 || spec.val == 0 || spec.test == 0 {
        return Err(Error::Data(format!("split {spec} has an empty partition")));
    }
    Ok((
        series.slice(0, spec.train),
        series.slice(spec.train, spec.val),
        series.slice(spec.train + spec.val, spec.test),
    ))
}

/// One history/target pair. Slices borrow the source series row-major.
#[derive(Debug, Clone, Copy)]
pub struct WindowSample<'a> {
    /// n×c row-major.
    pub history: &'a [f64],
    /// t×c row-major.
    pub target: &'a [f64],
    pub origin_index: usize,
}

/// Stride-1 sliding windows over one partition.
#[derive(Debug, Clone, Copy)]
pub struct Windows<'a> {
    series: &'a MultivariateSeries,
    n: usize,
    t: usize,
}

impl<'a> Windows<'a> {
    pub fn count(&self) -> usize {
        self.series.len() - self.n - self.t + 1
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> usize {
        self.t
    }

    pub fn channels(&self) -> usize {
        self.series.channels()
    }

    pub fn get(&self, i: usize) -> WindowSample<'a> {
        assert!(i < self.count(), "window {i} out of range");
        let c = self.series.channels();
        let v = self.series.values();
        WindowSample {
            history: &v[i * c..(i + self.n) * c],
            target: &v[(i + self.n) * c..(i + self.n + self.t) * c],
            origin_index: i,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = WindowSample<'a>> + '_ {
        (0..self.count()).map(|i| self.get(i))
    }
}

/// Stride-1 windowing: (len − n − t + 1) samples in time order.
pub fn windows(series: &MultivariateSeries, n: usize, t: usize) -> Result<Windows<'_>> {
    if n == 0 || t == 0 {
        return Err(Error::Data(format!("window sizes must be positive, got n={n}, t={t}")));
    }
    if n + t > series.len() {
        return Err(Error::Data(format!(
            "partition of {} rows too short for history {n} + horizon {t}",
            series.len()
        )));
    }
    Ok(Windows { series, n, t })
}

/// Per-channel mean and clamped population standard deviation of one
/// history window.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Subtracts the per-channel mean of the history and divides by its
/// population standard deviation (clamped at `NORM_EPS`).
pub fn instance_normalize(history: &[f64], n: usize, c: usize) -> (Vec<f64>, NormStats) {
    assert!(n >= 2, "instance norm needs at least 2 rows");
    assert_eq!(history.len(), n * c);
    let mut mean = vec![0.0; c];
    for row in history.chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0; c];
    for row in history.chunks(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|&s| (s / n as f64).sqrt().max(NORM_EPS))
        .collect();
    let stats = NormStats { mean, std };
    (normalize_with(history, &stats), stats)
}

/// Applies existing stats to a row-major ?×c matrix (targets use the stats
/// of their history window).
pub fn normalize_with(x: &[f64], stats: &NormStats) -> Vec<f64> {
    let c = stats.mean.len();
    assert_eq!(x.len() % c, 0);
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        for ((&v, &m), &s) in row.iter().zip(&stats.mean).zip(&stats.std) {
            out.push((v - m) / s);
        }
    }
    out
}

/// Exact inverse of `normalize_with`.
pub fn denormalize(pred: &[f64], stats: &NormStats) -> Vec<f64> {
    let c = stats.mean.len();
    assert_eq!(pred.len() % c, 0);
    let mut out = Vec::with_capacity(pred.len());
    for row in pred.chunks(c) {
        for ((&v, &m), &s) in row.iter().zip(&stats.mean).zip(&stats.std) {
            out.push(v * s + m);
        }
    }
    out
}

/// Deterministic synthetic series for tests and offline runs.
pub mod synth {
    use super::MultivariateSeries;
    use crate::numerics::rng::{self, TAG_SYNTH};
    use crate::Result;
    use rand::Rng;
    use std::io::Write;
    use std::path::Path;

    /// Sum of two incommensurate sinusoids plus a mild trend and noise,
    /// different phase per channel. Supports up to 28 days of second
    /// resolution timestamps.
    pub fn series(len: usize, channels: usize, seed: u64) -> MultivariateSeries {
        assert!(len < 28 * 86_400);
        let mut r = rng::stream(seed, &[TAG_SYNTH]);
        let mut values = vec![0.0; len * channels];
        for ch in 0..channels {
            let phase: f64 = r.gen_range(0.0..std::f64::consts::TAU);
            let amp: f64 = r.gen_range(0.5..2.0);
            let trend: f64 = r.gen_range(-0.002..0.002);
            for i in 0..len {
                let x = i as f64;
                let v = amp * (0.11 * x + phase).sin()
                    + 0.4 * (0.031 * x + 2.0 * phase).cos()
                    + trend * x
                    + 0.05 * r.gen_range(-1.0..1.0);
                values[i * channels + ch] = v;
            }
        }
        let timestamps = (0..len)
            .map(|i| {
                format!(
                    "2000-01-{:02} {:02}:{:02}:{:02}",
                    1 + i / 86_400,
                    (i / 3_600) % 24,
                    (i / 60) % 60,
                    i % 60
                )
            })
            .collect();
        let names = (0..channels).map(|ch| format!("ch{ch}")).collect();
        MultivariateSeries::from_parts(timestamps, names, values).unwrap()
    }

    /// Writes a series in the same format `load_csv` reads.
    pub fn write_csv(path: &Path, series: &MultivariateSeries) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "date")?;
        for name in series.channel_names() {
            write!(f, ",{name}")?;
        }
        writeln!(f)?;
        for (i, ts) in series.timestamps().iter().enumerate() {
            write!(f, "{ts}")?;
            for v in series.row(i) {
                write!(f, ",{v}")?;
            }
            writeln!(f)?;
        }
        f.flush()?;
        Ok(())
    }
}
