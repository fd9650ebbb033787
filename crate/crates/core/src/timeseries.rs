//! Hourly multi-area generation data: loading, chronological splitting,
//! min-max normalization, sliding windows and the dark-hour mask.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Timestamp layout used by every CSV in the project, e.g. `2023-06-01T13`.
pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad header: {0}")]
    Header(String),
    #[error("row {row}: {msg}")]
    Row { row: usize, msg: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    Fraction(f64),
    #[error("split of {n} rows at fraction {fraction} leaves one side empty")]
    EmptySplit { n: usize, fraction: f64 },
    #[error("need at least {required} rows for lookback {lookback} and horizon {horizon}, have {available}")]
    TooShort {
        required: usize,
        available: usize,
        lookback: usize,
        horizon: usize,
    },
    #[error("invalid window spec: {0}")]
    Window(String),
    #[error("no training rows for month {0}; dark mask undefined there")]
    MonthUncovered(u32),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub fn format_timestamp(ts: &NaiveDateTime) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

/// Parses `YYYY-MM-DDTHH`. Invalid calendar dates (e.g. Feb 30) are rejected.
pub fn parse_timestamp(s: &str) -> std::result::Result<NaiveDateTime, String> {
    let (date, hour) = s
        .trim()
        .split_once('T')
        .ok_or_else(|| format!("timestamp {s:?} is not of the form YYYY-MM-DDTHH"))?;
    let date = NaiveDate::parse_from_str(date, "%Y-%m-%d")
        .map_err(|e| format!("invalid date in timestamp {s:?}: {e}"))?;
    if hour.len() != 2 || !hour.bytes().all(|b| b.is_ascii_digit()) {
        return Err(format!("hour in timestamp {s:?} must be two digits"));
    }
    let hour: u32 = hour.parse().map_err(|_| format!("bad hour in {s:?}"))?;
    date.and_hms_opt(hour, 0, 0)
        .ok_or_else(|| format!("hour {hour} out of range 00-23 in {s:?}"))
}

/// Hourly generation matrix, `N` rows by `F` features, in MW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    timestamps: Vec<NaiveDateTime>,
    /// Row-major `N x F`.
    values: Vec<f64>,
    feature_names: Vec<String>,
}

impl TimeSeriesDataset {
    /// Builds a dataset, checking the hourly-grid and value invariants.
    pub fn new(
        timestamps: Vec<NaiveDateTime>,
        values: Vec<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let n = timestamps.len();
        let f = feature_names.len();
        if n == 0 {
            return Err(DataError::Invalid("dataset has no rows".into()));
        }
        if f == 0 {
            return Err(DataError::Invalid("dataset has no features".into()));
        }
        if values.len() != n * f {
            return Err(DataError::Invalid(format!(
                "value matrix has {} entries, expected {n} x {f}",
                values.len()
            )));
        }
        for k in 1..n {
            if timestamps[k] - timestamps[k - 1] != Duration::hours(1) {
                return Err(DataError::Invalid(format!(
                    "timestamps {} and {} are not one hour apart",
                    format_timestamp(&timestamps[k - 1]),
                    format_timestamp(&timestamps[k])
                )));
            }
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(DataError::Invalid(format!(
                "value {} at row {}, feature {} is not a finite non-negative MW figure",
                values[pos],
                pos / f,
                feature_names[pos % f]
            )));
        }
        Ok(Self {
            timestamps,
            values,
            feature_names,
        })
    }

    /// Single-feature dataset from a plain hourly series.
    pub fn from_series(start: NaiveDateTime, name: &str, values: Vec<f64>) -> Result<Self> {
        let timestamps = (0..values.len())
            .map(|k| start + Duration::hours(k as i64))
            .collect();
        Self::new(timestamps, values, vec![name.to_string()])
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn value(&self, row: usize, feature: usize) -> f64 {
        self.values[row * self.num_features() + feature]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let f = self.num_features();
        &self.values[row * f..(row + 1) * f]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column(&self, feature: usize) -> Vec<f64> {
        (0..self.len()).map(|r| self.value(r, feature)).collect()
    }

    /// Rows `start..end` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(DataError::Invalid(format!(
                "row range {start}..{end} invalid for {} rows",
                self.len()
            )));
        }
        let f = self.num_features();
        Ok(Self {
            timestamps: self.timestamps[start..end].to_vec(),
            values: self.values[start * f..end * f].to_vec(),
            feature_names: self.feature_names.clone(),
        })
    }

    pub fn to_csv_writer<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.feature_names.iter().cloned());
        out.write_record(&header)?;
        for r in 0..self.len() {
            let mut rec = vec![format_timestamp(&self.timestamps[r])];
            rec.extend(self.row(r).iter().map(|v| format!("{v}")));
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| DataError::Io {
            path: "<writer>".into(),
            source: e,
        })?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        self.to_csv_writer(file)
    }
}

/// Reads a `timestamp,<area1>,<area2>,...` file. Rows keep file order.
pub fn load_csv(path: &Path) -> Result<TimeSeriesDataset> {
    let file = File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_csv(file)
}

/// Parses the timeseries CSV schema from any reader. Row numbers in errors
/// are 1-based data rows (the header is row 0).
pub fn parse_csv<R: Read>(reader: R) -> Result<TimeSeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 || &header[0] != "timestamp" {
        return Err(DataError::Header(
            "expected `timestamp,<area1>,...` with at least one area column".into(),
        ));
    }
    let feature_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let f = feature_names.len();

    let mut timestamps: Vec<NaiveDateTime> = Vec::new();
    let mut values = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let row = idx + 1;
        let rec = rec.map_err(|e| DataError::Row {
            row,
            msg: e.to_string(),
        })?;
        if rec.len() != f + 1 {
            return Err(DataError::Row {
                row,
                msg: format!("expected {} fields, found {}", f + 1, rec.len()),
            });
        }
        let ts = parse_timestamp(&rec[0]).map_err(|msg| DataError::Row { row, msg })?;
        if let Some(prev) = timestamps.last() {
            let step = ts - *prev;
            if step == Duration::zero() {
                return Err(DataError::Row {
                    row,
                    msg: format!("duplicate timestamp {}", &rec[0]),
                });
            }
            if step != Duration::hours(1) {
                return Err(DataError::Row {
                    row,
                    msg: format!(
                        "gap in hourly sequence: {} follows {}",
                        &rec[0],
                        format_timestamp(prev)
                    ),
                });
            }
        }
        timestamps.push(ts);
        for (j, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field.parse().map_err(|_| DataError::Row {
                row,
                msg: format!("non-numeric value {field:?} in column {}", feature_names[j]),
            })?;
            if !v.is_finite() || v < 0.0 {
                return Err(DataError::Row {
                    row,
                    msg: format!("value {v} in column {} must be finite and >= 0", feature_names[j]),
                });
            }
            values.push(v);
        }
    }
    TimeSeriesDataset::new(timestamps, values, feature_names)
}

/// First `floor(N * fraction)` rows for training, the rest for testing.
pub fn split_chronological(
    ds: &TimeSeriesDataset,
    train_fraction: f64,
) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Fraction(train_fraction));
    }
    let n = ds.len();
    let cut = (n as f64 * train_fraction).floor() as usize;
    if cut == 0 || cut == n {
        return Err(DataError::EmptySplit {
            n,
            fraction: train_fraction,
        });
    }
    Ok((ds.slice(0, cut)?, ds.slice(cut, n)?))
}

/// Per-feature min/max fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizationParams {
    pub fn fit(train: &TimeSeriesDataset) -> Self {
        let f = train.num_features();
        let mut min = vec![f64::INFINITY; f];
        let mut max = vec![f64::NEG_INFINITY; f];
        for r in 0..train.len() {
            for (j, &v) in train.row(r).iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Self { min, max }
    }

    pub fn num_features(&self) -> usize {
        self.min.len()
    }

    fn range(&self, feature: usize) -> f64 {
        self.max[feature] - self.min[feature]
    }

    /// `(x - min) / (max - min)`; a constant feature maps to 0.
    pub fn normalize_value(&self, feature: usize, x: f64) -> f64 {
        let range = self.range(feature);
        if range > 0.0 {
            (x - self.min[feature]) / range
        } else {
            0.0
        }
    }

    pub fn denormalize_value(&self, feature: usize, z: f64) -> f64 {
        let range = self.range(feature);
        if range > 0.0 {
            z * range + self.min[feature]
        } else {
            self.min[feature]
        }
    }

    /// Normalizes one row of `F` values.
    pub fn normalize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, &x)| self.normalize_value(j, x))
            .collect()
    }

    pub fn denormalize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, &z)| self.denormalize_value(j, z))
            .collect()
    }

    /// Normalized copy of a whole dataset. Normalized values may fall outside
    /// `[0, 1]` (and below zero) for rows not seen during fitting, so the
    /// result is a plain matrix rather than a `TimeSeriesDataset`.
    pub fn transform(&self, ds: &TimeSeriesDataset) -> NormalizedSeries {
        let f = ds.num_features();
        let mut values = Vec::with_capacity(ds.len() * f);
        for r in 0..ds.len() {
            values.extend(self.normalize(ds.row(r)));
        }
        NormalizedSeries {
            rows: ds.len(),
            features: f,
            values,
        }
    }
}

/// Row-major normalized matrix aligned with its source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSeries {
    pub rows: usize,
    pub features: usize,
    pub values: Vec<f64>,
}

impl NormalizedSeries {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.features..(r + 1) * self.features]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub lookback: usize,
    pub horizon: usize,
    pub target: usize,
}

impl WindowSpec {
    pub fn new(lookback: usize, horizon: usize, target: usize) -> Self {
        Self {
            lookback,
            horizon,
            target,
        }
    }

    pub fn validate(&self, features: usize) -> Result<()> {
        if self.lookback == 0 {
            return Err(DataError::Window("lookback must be >= 1".into()));
        }
        if self.horizon == 0 {
            return Err(DataError::Window("horizon must be >= 1".into()));
        }
        if self.target >= features {
            return Err(DataError::Window(format!(
                "target feature {} out of range for {features} features",
                self.target
            )));
        }
        Ok(())
    }

    /// Smallest series length that yields one sample.
    pub fn min_rows(&self) -> usize {
        self.lookback + self.horizon
    }

    /// Number of samples a series of `n` rows produces.
    pub fn sample_count(&self, n: usize) -> usize {
        (n + 1).saturating_sub(self.min_rows())
    }

    /// Row index of the label for the sample starting at `start`.
    pub fn label_row(&self, start: usize) -> usize {
        start + self.lookback + self.horizon - 1
    }
}

/// One supervised example: `lookback x F` normalized inputs and a normalized label.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    /// Row-major `lookback x F`.
    pub input: Vec<f64>,
    pub label: f64,
}

/// Stride-1 sliding windows: sample `k` reads rows `k..k+p` and is labelled
/// with row `k+p+m-1` of the target feature.
pub fn make_windows(series: &NormalizedSeries, spec: &WindowSpec) -> Result<Vec<WindowedSample>> {
    spec.validate(series.features)?;
    if series.rows < spec.min_rows() {
        return Err(DataError::TooShort {
            required: spec.min_rows(),
            available: series.rows,
            lookback: spec.lookback,
            horizon: spec.horizon,
        });
    }
    let f = series.features;
    Ok((0..spec.sample_count(series.rows))
        .map(|k| WindowedSample {
            input: series.values[k * f..(k + spec.lookback) * f].to_vec(),
            label: series.values[spec.label_row(k) * f + spec.target],
        })
        .collect())
}

/// Hourly forecast for one target feature, in MW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSeries {
    pub label: String,
    pub timestamps: Vec<NaiveDateTime>,
    pub values: Vec<f64>,
}

impl ForecastSeries {
    pub fn new(label: impl Into<String>, timestamps: Vec<NaiveDateTime>, values: Vec<f64>) -> Result<Self> {
        if timestamps.len() != values.len() {
            return Err(DataError::Invalid(format!(
                "forecast has {} timestamps but {} values",
                timestamps.len(),
                values.len()
            )));
        }
        for k in 1..timestamps.len() {
            if timestamps[k] - timestamps[k - 1] != Duration::hours(1) {
                return Err(DataError::Invalid("forecast timestamps must be hourly".into()));
            }
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(DataError::Invalid(format!("forecast value {v} is not a finite MW figure >= 0")));
        }
        Ok(Self {
            label: label.into(),
            timestamps,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// 12 x 24 table of (month, hour) slots where PV output is forced to zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DarkHourMask {
    dark: Vec<[bool; 24]>,
}

impl Default for DarkHourMask {
    fn default() -> Self {
        Self {
            dark: vec![[false; 24]; 12],
        }
    }
}

impl DarkHourMask {
    /// `month` is 1-based, `hour` 0..24.
    pub fn is_dark(&self, month: u32, hour: u32) -> bool {
        self.dark[(month - 1) as usize][hour as usize]
    }

    pub fn set(&mut self, month: u32, hour: u32, dark: bool) {
        self.dark[(month - 1) as usize][hour as usize] = dark;
    }

    pub fn is_dark_at(&self, ts: &NaiveDateTime) -> bool {
        self.is_dark(ts.month(), ts.hour())
    }

    /// A deserialized mask must still cover all 12 months.
    pub fn validate(&self) -> Result<()> {
        if self.dark.len() != 12 {
            return Err(DataError::Invalid(format!("dark mask has {} months, expected 12", self.dark.len())));
        }
        Ok(())
    }

    pub fn dark_slot_count(&self) -> usize {
        self.dark.iter().flatten().filter(|d| **d).count()
    }

    /// Dark iff every training observation of `target` at (month, hour) is 0 MW.
    /// Fails if some calendar month has no training rows.
    pub fn derive(train: &TimeSeriesDataset, target: usize) -> Result<Self> {
        let (mask, covered) = Self::derive_partial(train, target)?;
        if let Some(m) = (1..=12).find(|m| !covered[(*m - 1) as usize]) {
            return Err(DataError::MonthUncovered(m));
        }
        Ok(mask)
    }

    /// Like [`DarkHourMask::derive`], but months without training rows copy
    /// the mask of the nearest covered month (circular month distance, ties
    /// to the lower month number).
    pub fn derive_filled(train: &TimeSeriesDataset, target: usize) -> Result<Self> {
        let (mut mask, covered) = Self::derive_partial(train, target)?;
        let covered_months: Vec<u32> = (1..=12).filter(|m| covered[(*m - 1) as usize]).collect();
        for m in 1..=12u32 {
            if !covered[(m - 1) as usize] {
                let src = nearest_month(m, &covered_months).expect("at least one covered month");
                mask.dark[(m - 1) as usize] = mask.dark[(src - 1) as usize];
            }
        }
        Ok(mask)
    }

    fn derive_partial(train: &TimeSeriesDataset, target: usize) -> Result<(Self, [bool; 12])> {
        if target >= train.num_features() {
            return Err(DataError::Window(format!("target feature {target} out of range")));
        }
        let mut max = vec![[f64::NEG_INFINITY; 24]; 12];
        let mut covered = [false; 12];
        for (r, ts) in train.timestamps().iter().enumerate() {
            let m = ts.month0() as usize;
            let h = ts.hour() as usize;
            covered[m] = true;
            max[m][h] = max[m][h].max(train.value(r, target));
        }
        let dark = max
            .iter()
            .map(|hours| {
                let mut row = [false; 24];
                for (h, &mx) in hours.iter().enumerate() {
                    // Unobserved hours in a covered month stay bright.
                    row[h] = mx == 0.0;
                }
                row
            })
            .collect();
        Ok((Self { dark }, covered))
    }

    /// Replaces forecast values in dark slots with exactly 0 MW.
    pub fn apply(&self, forecast: &ForecastSeries) -> ForecastSeries {
        let values = forecast
            .timestamps
            .iter()
            .zip(&forecast.values)
            .map(|(ts, &v)| if self.is_dark_at(ts) { 0.0 } else { v })
            .collect();
        ForecastSeries {
            label: forecast.label.clone(),
            timestamps: forecast.timestamps.clone(),
            values,
        }
    }

    /// Reads a `month,hour,dark` override file. Slots not listed are bright.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::parse_csv(file)
    }

    pub fn parse_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["month", "hour", "dark"] {
            return Err(DataError::Header("mask file header must be `month,hour,dark`".into()));
        }
        let mut mask = Self::default();
        for (idx, rec) in rdr.records().enumerate() {
            let row = idx + 1;
            let rec = rec.map_err(|e| DataError::Row { row, msg: e.to_string() })?;
            let field = |i: usize| -> Result<u32> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| DataError::Row {
                        row,
                        msg: format!("field {} is not an integer", i + 1),
                    })
            };
            let (month, hour, dark) = (field(0)?, field(1)?, field(2)?);
            if !(1..=12).contains(&month) || hour > 23 || dark > 1 {
                return Err(DataError::Row {
                    row,
                    msg: format!("out of range entry month={month} hour={hour} dark={dark}"),
                });
            }
            mask.set(month, hour, dark == 1);
        }
        Ok(mask)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["month", "hour", "dark"])?;
        for m in 1..=12u32 {
            for h in 0..24u32 {
                let d = if self.is_dark(m, h) { "1" } else { "0" };
                out.write_record([m.to_string(), h.to_string(), d.to_string()])?;
            }
        }
        out.flush().map_err(|e| DataError::Io {
            path: "<writer>".into(),
            source: e,
        })?;
        Ok(())
    }
}

impl fmt::Display for DarkHourMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (m, row) in self.dark.iter().enumerate() {
            let line: String = row.iter().map(|d| if *d { '#' } else { '.' }).collect();
            writeln!(f, "{:>2} {line}", m + 1)?;
        }
        Ok(())
    }
}

/// Nearest month in `candidates` by circular distance; ties go to the lower month.
pub fn nearest_month(month: u32, candidates: &[u32]) -> Option<u32> {
    candidates.iter().copied().min_by_key(|&c| {
        let d = (month as i32 - c as i32).rem_euclid(12);
        (d.min(12 - d), c)
    })
}
