//! Series ingestion, synthetic generators, windowing, and normalization.
//!
//! A [`RawSeries`] couples a univariate target with calendar covariates
//! (hour-of-day and day-of-week as sin/cos pairs, so d_x = 4). Sliding
//! [`TimeSeriesWindow`]s carry a lookback block of covariates-plus-target,
//! the future covariates, and the future targets. Splits are chronological
//! and normalization statistics come from the training portion only.

use std::f64::consts::TAU;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::{self, TAG_SYNTH};
use crate::tensor::Tensor;

pub const D_X: usize = 4;
pub const D_Y: usize = 1;

/// Univariate series with per-step calendar covariates.
#[derive(Clone, Debug)]
pub struct RawSeries {
    pub name: String,
    pub values: Vec<f64>,
    covariates: Vec<f64>,
    /// Hour index per step, kept so the series can be re-emitted as CSV.
    pub hours: Vec<i64>,
}

impl RawSeries {
    pub fn new(name: String, values: Vec<f64>, covariates: Vec<f64>, hours: Vec<i64>) -> Result<Self> {
        if covariates.len() != values.len() * D_X || hours.len() != values.len() {
            return Err(Error::Dataset(format!(
                "series `{}`: {} values, {} covariate floats, {} hours",
                name,
                values.len(),
                covariates.len(),
                hours.len()
            )));
        }
        Ok(RawSeries { name, values, covariates, hours })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cov(&self, t: usize) -> &[f64] {
        &self.covariates[t * D_X..(t + 1) * D_X]
    }
}

/// Sin/cos encoding of hour-of-day and day-of-week.
pub fn calendar_covariates(hour_of_day: u32, day_of_week: u32) -> [f64; D_X] {
    let hp = TAU * f64::from(hour_of_day) / 24.0;
    let dp = TAU * f64::from(day_of_week) / 7.0;
    [hp.sin(), hp.cos(), dp.sin(), dp.cos()]
}

fn covariates_for_hour_index(h: i64) -> [f64; D_X] {
    let hour = h.rem_euclid(24) as u32;
    let dow = h.div_euclid(24).rem_euclid(7) as u32;
    calendar_covariates(hour, dow)
}

/// One timestamp cell: either an integer hour index or an ISO-8601 datetime.
fn parse_timestamp(cell: &str) -> Option<(i64, u32, u32)> {
    let cell = cell.trim();
    if let Ok(h) = cell.parse::<i64>() {
        let hour = h.rem_euclid(24) as u32;
        let dow = h.div_euclid(24).rem_euclid(7) as u32;
        return Some((h, hour, dow));
    }
    use chrono::{Datelike, NaiveDateTime, Timelike};
    let naive = chrono::DateTime::parse_from_rfc3339(cell)
        .map(|dt| dt.naive_utc())
        .or_else(|_| NaiveDateTime::parse_from_str(cell, "%Y-%m-%dT%H:%M:%S"))
        .or_else(|_| NaiveDateTime::parse_from_str(cell, "%Y-%m-%d %H:%M:%S"))
        .ok()?;
    let key = naive.and_utc().timestamp() / 3600;
    Some((key, naive.hour(), naive.weekday().num_days_from_monday()))
}

/// Load a comma-delimited file with a header row. The timestamp column may
/// hold ISO-8601 datetimes or integer hour indices; the target column must
/// parse as float. Rows must be in strictly increasing time order.
pub fn load_csv(path: &Path, target_column: &str, timestamp_column: &str) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Csv(format!("{}: {}", path.display(), e)))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Csv(format!("{}: {}", path.display(), e)))?
        .clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Csv(format!("{}: missing column `{}`", path.display(), name)))
    };
    let ts_idx = find(timestamp_column)?;
    let target_idx = find(target_column)?;

    let mut values = Vec::new();
    let mut covariates = Vec::new();
    let mut hours = Vec::new();
    let mut prev_key: Option<i64> = None;
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Csv(format!("{}: {}", path.display(), e)))?;
        let line = record.position().map_or(0, |p| p.line());
        let ts_cell = record.get(ts_idx).unwrap_or("");
        let (key, hour, dow) = parse_timestamp(ts_cell).ok_or_else(|| {
            Error::Csv(format!("{}: line {}: unparseable timestamp `{}`", path.display(), line, ts_cell))
        })?;
        if let Some(prev) = prev_key {
            if key <= prev {
                return Err(Error::Csv(format!(
                    "{}: line {}: non-monotonic timestamp `{}`",
                    path.display(),
                    line,
                    ts_cell
                )));
            }
        }
        prev_key = Some(key);
        let target_cell = record.get(target_idx).unwrap_or("");
        let value: f64 = target_cell.trim().parse().map_err(|_| {
            Error::Csv(format!(
                "{}: line {}: unparseable target `{}` in column `{}`",
                path.display(),
                line,
                target_cell,
                target_column
            ))
        })?;
        values.push(value);
        covariates.extend_from_slice(&calendar_covariates(hour, dow));
        hours.push(key);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".to_string());
    RawSeries::new(name, values, covariates, hours)
}

/// Write a series in the same dialect `load_csv` reads.
pub fn write_csv(series: &RawSeries, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::Csv(format!("{}: {}", path.display(), e)))?;
    wtr.write_record(["timestamp", "target"])
        .map_err(|e| Error::Csv(e.to_string()))?;
    for (h, v) in series.hours.iter().zip(&series.values) {
        wtr.write_record([h.to_string(), format!("{}", v)])
            .map_err(|e| Error::Csv(e.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeriesKind {
    SineMix,
    TrendSeasonal,
    Sawtooth,
}

impl FromStr for SeriesKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine-mix" => Ok(SeriesKind::SineMix),
            "trend-seasonal" => Ok(SeriesKind::TrendSeasonal),
            "sawtooth" => Ok(SeriesKind::Sawtooth),
            other => Err(Error::Config(format!(
                "unknown series kind `{}` (expected sine-mix, trend-seasonal, or sawtooth)",
                other
            ))),
        }
    }
}

impl fmt::Display for SeriesKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeriesKind::SineMix => "sine-mix",
            SeriesKind::TrendSeasonal => "trend-seasonal",
            SeriesKind::Sawtooth => "sawtooth",
        })
    }
}

/// Two incommensurate sinusoid periods for the sine-mix generator. The
/// second period is 24/sqrt(3), so the pair never repeats jointly.
const SINE_P1: f64 = 24.0;
const SINE_A1: f64 = 1.0;
const SINE_A2: f64 = 0.5;

fn sine_p2() -> f64 {
    24.0 / 3.0_f64.sqrt()
}

/// Deterministic synthetic series on an hourly grid starting at hour 0.
pub fn synth_series(kind: SeriesKind, length: usize, seed: u64, noise_scale: f64) -> RawSeries {
    let kind_tag = match kind {
        SeriesKind::SineMix => 1,
        SeriesKind::TrendSeasonal => 2,
        SeriesKind::Sawtooth => 3,
    };
    let mut rng = rng::stream(seed, &[TAG_SYNTH, kind_tag, length as u64, noise_scale.to_bits()]);
    let noise = rng::standard_normals(&mut rng, length);
    let mut values = Vec::with_capacity(length);
    let mut covariates = Vec::with_capacity(length * D_X);
    let mut hours = Vec::with_capacity(length);
    let p2 = sine_p2();
    for t in 0..length {
        let tf = t as f64;
        let base = match kind {
            SeriesKind::SineMix => {
                SINE_A1 * (TAU * tf / SINE_P1).sin() + SINE_A2 * (TAU * tf / p2).sin()
            }
            SeriesKind::TrendSeasonal => {
                0.002 * tf + (TAU * tf / 24.0).sin() + 0.3 * (TAU * tf / 168.0).sin()
            }
            SeriesKind::Sawtooth => 2.0 * ((tf / 24.0) - (tf / 24.0).floor()) - 1.0,
        };
        values.push(base + noise_scale * noise[t]);
        covariates.extend_from_slice(&covariates_for_hour_index(t as i64));
        hours.push(t as i64);
    }
    RawSeries { name: format!("{}-{}", kind, seed), values, covariates, hours }
}

/// Worst-case second difference of the noise-free sine-mix signal; each
/// sinusoid contributes at most 2a(1 - cos omega) in absolute value.
pub fn sine_mix_curvature_bound() -> f64 {
    let w1 = TAU / SINE_P1;
    let w2 = TAU / sine_p2();
    2.0 * SINE_A1 * (1.0 - w1.cos()) + 2.0 * SINE_A2 * (1.0 - w2.cos())
}

#[derive(Clone, Copy, Debug)]
pub struct WindowConfig {
    pub kappa: usize,
    pub tau: usize,
    pub stride: usize,
}

impl WindowConfig {
    pub fn new(kappa: usize, tau: usize, stride: usize) -> Result<Self> {
        if kappa < 1 || tau < 1 || stride < 1 {
            return Err(Error::Config(format!(
                "window config requires kappa, tau, stride >= 1 (got {}, {}, {})",
                kappa, tau, stride
            )));
        }
        Ok(WindowConfig { kappa, tau, stride })
    }
}

/// One forecasting instance: lookback covariates+target, future covariates,
/// and the future target to predict.
#[derive(Clone, Debug)]
pub struct TimeSeriesWindow {
    /// kappa x (d_x + 1); the target occupies the last column.
    pub x_past: Tensor,
    /// tau x d_x.
    pub cov_future: Tensor,
    /// tau x 1.
    pub y_future: Tensor,
    /// Start index of the lookback in the raw series.
    pub start: usize,
}

pub fn make_windows(series: &RawSeries, cfg: &WindowConfig) -> Result<Vec<TimeSeriesWindow>> {
    let l = series.len();
    let span = cfg.kappa + cfg.tau;
    if l < span {
        return Err(Error::Dataset(format!(
            "series `{}` has {} steps; need at least kappa+tau = {}",
            series.name, l, span
        )));
    }
    let count = (l - span) / cfg.stride + 1;
    let mut windows = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * cfg.stride;
        let t0 = start + cfg.kappa;
        let mut x_past = Vec::with_capacity(cfg.kappa * (D_X + D_Y));
        for t in start..t0 {
            x_past.extend_from_slice(series.cov(t));
            x_past.push(series.values[t]);
        }
        let mut cov_future = Vec::with_capacity(cfg.tau * D_X);
        let mut y_future = Vec::with_capacity(cfg.tau);
        for t in t0..t0 + cfg.tau {
            cov_future.extend_from_slice(series.cov(t));
            y_future.push(series.values[t]);
        }
        windows.push(TimeSeriesWindow {
            x_past: Tensor::new(vec![cfg.kappa, D_X + D_Y], x_past)?,
            cov_future: Tensor::new(vec![cfg.tau, D_X], cov_future)?,
            y_future: Tensor::new(vec![cfg.tau, D_Y], y_future)?,
            start,
        });
    }
    Ok(windows)
}

/// Chronological 80/10/10 split by window start time.
pub fn split_train_val_test(
    windows: Vec<TimeSeriesWindow>,
) -> Result<(Vec<TimeSeriesWindow>, Vec<TimeSeriesWindow>, Vec<TimeSeriesWindow>)> {
    let n = windows.len();
    if n < 10 {
        return Err(Error::Dataset(format!("need at least 10 windows to split, got {}", n)));
    }
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let mut train = windows;
    let mut val = train.split_off(n_train);
    let test = val.split_off(n_val);
    Ok((train, val, test))
}

/// Z-score statistics fit on training targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    pub fn apply_value(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert_value(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }

    /// Normalize the target channel (last column of `x_past` and all of
    /// `y_future`); covariates pass through unchanged.
    pub fn apply_window(&self, w: &TimeSeriesWindow) -> TimeSeriesWindow {
        let mut out = w.clone();
        let cols = out.x_past.cols();
        {
            let data = out.x_past.data_mut();
            let rows = data.len() / cols;
            for r in 0..rows {
                data[r * cols + cols - 1] = self.apply_value(data[r * cols + cols - 1]);
            }
        }
        for v in out.y_future.data_mut() {
            *v = self.apply_value(*v);
        }
        out
    }

    pub fn apply_all(&self, windows: &[TimeSeriesWindow]) -> Vec<TimeSeriesWindow> {
        windows.iter().map(|w| self.apply_window(w)).collect()
    }
}

/// Population mean/std over every target value appearing in the given
/// (training) windows: the lookback target column plus the future targets.
pub fn fit_normalizer(train: &[TimeSeriesWindow]) -> Result<Normalizer> {
    let mut values = Vec::new();
    for w in train {
        let cols = w.x_past.cols();
        for r in 0..w.x_past.rows() {
            values.push(w.x_past.at2(r, cols - 1));
        }
        values.extend_from_slice(w.y_future.data());
    }
    if values.is_empty() {
        return Err(Error::Dataset("cannot fit normalizer on empty training set".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-12 {
        return Err(Error::Dataset("training targets have zero variance".into()));
    }
    Ok(Normalizer { mean, std })
}
