//! Experiment orchestration: JSON configs, run grids over
//! (variant, horizon, seed), per-run artifacts, and report aggregation.
//!
//! A config names one dataset and a grid of treatments. [`run_experiment`]
//! trains every grid cell, writes one directory per run under `out_dir`
//! (loss history, checkpoint, prediction dump, metrics), and reduces the
//! per-run scores to a report with mean and standard error over seeds.
//! [`report_from_dir`] rebuilds the same report from the metrics files
//! alone, so a report can be regenerated without retraining anything.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::data::{
    fit_normalizer, load_csv, make_windows, split_train_val_test, synth_series, Normalizer,
    RawSeries, SeriesKind, TimeSeriesWindow, WindowConfig,
};
use crate::error::{Error, Result};
use crate::forecaster::ForecasterHyper;
use crate::metrics::mean_stderr;
use crate::pipeline::{evaluate, train, EvalResult, TrainConfig, Variant};

/// A JSON field that accepts either one value or a list of values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(vs) => vs.clone(),
        }
    }
}

/// Where the series comes from: a built-in generator or a CSV on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSpec {
    /// Built-in generator; `kind` is one of the `SeriesKind` tags.
    Synthetic {
        kind: String,
        length: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Hourly CSV with named target and timestamp columns.
    Csv { csv: PathBuf, target_column: String, timestamp_column: String },
}

/// One experiment: a dataset, a model shape, and the grid of treatment
/// variants, horizons, and seeds to sweep. Parsed from a JSON file; the
/// sweepable fields (`variant`, `tau`, `seed`) accept a scalar or a list.
///
/// Every field except `dataset` has a default, so a minimal config is
/// `{"dataset": {"kind": "sine-mix", "length": 2000}}`: all six variants,
/// one horizon of 12, seeds 0, 1, 2.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_variant")]
    pub variant: OneOrMany<String>,
    #[serde(default = "default_kappa")]
    pub kappa: usize,
    #[serde(default = "default_tau")]
    pub tau: OneOrMany<usize>,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_n_layers")]
    pub n_layers: usize,
    #[serde(default = "default_n_heads")]
    pub n_heads: usize,
    #[serde(rename = "M", default = "default_m")]
    pub m_inducing: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "default_seed")]
    pub seed: OneOrMany<u64>,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    pub dataset: DatasetSpec,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub detach_blur: bool,
    #[serde(default)]
    pub blur_per_epoch: bool,
    /// Reserved for multi-series datasets. Every dataset here carries a
    /// single series, where per-series and pooled metrics coincide.
    #[serde(default = "default_true")]
    pub per_series: bool,
}

fn default_variant() -> OneOrMany<String> {
    OneOrMany::Many(Variant::ALL.iter().map(|v| v.to_string()).collect())
}
fn default_kappa() -> usize {
    48
}
fn default_tau() -> OneOrMany<usize> {
    OneOrMany::One(12)
}
fn default_d_model() -> usize {
    16
}
fn default_n_layers() -> usize {
    1
}
fn default_n_heads() -> usize {
    8
}
fn default_m() -> usize {
    4
}
fn default_lambda() -> f64 {
    0.001
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    50
}
fn default_warmup() -> usize {
    1000
}
fn default_seed() -> OneOrMany<u64> {
    OneOrMany::Many(vec![0, 1, 2])
}
fn default_eval_samples() -> usize {
    1
}
fn default_stride() -> usize {
    1
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))
    }

    pub fn variants(&self) -> Result<Vec<Variant>> {
        let tags = self.variant.to_vec();
        if tags.is_empty() {
            return Err(Error::Config("config needs at least one variant".into()));
        }
        let mut out = Vec::with_capacity(tags.len());
        for tag in &tags {
            let v: Variant = tag.parse()?;
            if out.contains(&v) {
                return Err(Error::Config(format!("duplicate variant `{}` in config", v)));
            }
            out.push(v);
        }
        Ok(out)
    }

    pub fn taus(&self) -> Result<Vec<usize>> {
        let taus = self.tau.to_vec();
        if taus.is_empty() {
            return Err(Error::Config("config needs at least one tau".into()));
        }
        for (i, t) in taus.iter().enumerate() {
            if taus[..i].contains(t) {
                return Err(Error::Config(format!("duplicate tau {} in config", t)));
            }
        }
        Ok(taus)
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        let seeds = self.seed.to_vec();
        if seeds.is_empty() {
            return Err(Error::Config("config needs at least one seed".into()));
        }
        for (i, s) in seeds.iter().enumerate() {
            if seeds[..i].contains(s) {
                return Err(Error::Config(format!("duplicate seed {} in config", s)));
            }
        }
        Ok(seeds)
    }

    /// The training configuration for one grid cell.
    pub fn train_config(&self, variant: Variant, tau: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            variant,
            hyper: ForecasterHyper {
                d_model: self.d_model,
                n_heads: self.n_heads,
                n_layers: self.n_layers,
                kappa: self.kappa,
                tau,
            },
            m_inducing: self.m_inducing,
            lambda: self.lambda,
            batch: self.batch,
            epochs: self.epochs,
            warmup: self.warmup,
            seed,
            eval_samples: self.eval_samples,
            detach_blur: self.detach_blur,
            blur_per_epoch: self.blur_per_epoch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let variants = self.variants()?;
        let taus = self.taus()?;
        let seeds = self.seeds()?;
        if let DatasetSpec::Synthetic { kind, length, .. } = &self.dataset {
            kind.parse::<SeriesKind>()?;
            if *length == 0 {
                return Err(Error::Config("synthetic dataset length must be positive".into()));
            }
        }
        for &tau in &taus {
            WindowConfig::new(self.kappa, tau, self.stride)?;
            for &variant in &variants {
                self.train_config(variant, tau, seeds[0]).validate()?;
            }
        }
        Ok(())
    }

    /// Twelve hex digits identifying everything that determines a run's
    /// numbers except the seed, so runs that differ only by seed (or by
    /// where their artifacts land) share a hash.
    pub fn config_hash(&self) -> Result<String> {
        let variants: Vec<String> = self.variants()?.iter().map(|v| v.to_string()).collect();
        let canon = serde_json::json!({
            "batch": self.batch,
            "blur_per_epoch": self.blur_per_epoch,
            "d_model": self.d_model,
            "dataset": self.dataset,
            "detach_blur": self.detach_blur,
            "epochs": self.epochs,
            "eval_samples": self.eval_samples,
            "kappa": self.kappa,
            "lambda": self.lambda,
            "m_inducing": self.m_inducing,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "per_series": self.per_series,
            "stride": self.stride,
            "tau": self.taus()?,
            "variant": variants,
            "warmup": self.warmup,
        });
        let digest = Sha256::digest(canon.to_string().as_bytes());
        Ok(digest[..6].iter().map(|b| format!("{:02x}", b)).collect())
    }
}

/// Normalized train/val/test windows plus the statistics that normalized
/// them (needed to write predictions back in the original scale).
pub struct PreparedData {
    pub train: Vec<TimeSeriesWindow>,
    pub val: Vec<TimeSeriesWindow>,
    pub test: Vec<TimeSeriesWindow>,
    pub normalizer: Normalizer,
}

pub fn load_series(spec: &DatasetSpec) -> Result<RawSeries> {
    match spec {
        DatasetSpec::Synthetic { kind, length, noise, seed } => {
            Ok(synth_series(kind.parse()?, *length, *seed, *noise))
        }
        DatasetSpec::Csv { csv, target_column, timestamp_column } => {
            load_csv(csv, target_column, timestamp_column)
        }
    }
}

/// Load or synthesize the series, window it, split chronologically, and
/// z-score everything with statistics fit on the training split.
pub fn prepare_dataset(
    spec: &DatasetSpec,
    kappa: usize,
    tau: usize,
    stride: usize,
) -> Result<PreparedData> {
    let series = load_series(spec)?;
    let windows = make_windows(&series, &WindowConfig::new(kappa, tau, stride)?)?;
    let (train, val, test) = split_train_val_test(windows)?;
    let normalizer = fit_normalizer(&train)?;
    Ok(PreparedData {
        train: normalizer.apply_all(&train),
        val: normalizer.apply_all(&val),
        test: normalizer.apply_all(&test),
        normalizer,
    })
}

/// One trained run's test-set scores, as serialized to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub variant: String,
    pub tau: usize,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
    pub incidents: usize,
    pub config_hash: String,
}

pub fn run_dir_name(variant: Variant, tau: usize, seed: u64) -> String {
    format!("{}_tau{}_seed{}", variant, tau, seed)
}

/// Train one grid cell and leave its artifacts in `run_dir`: `history.csv`
/// (per-epoch losses), `checkpoint.txt` (best-validation parameters plus
/// the normalizer), `predictions.csv` (test forecasts in the original data
/// scale, one window per horizon length to bound file size), and
/// `metrics.json` (the returned scores, normalized space).
pub fn run_single(
    cfg: &TrainConfig,
    data: &PreparedData,
    run_dir: &Path,
    config_hash: &str,
) -> Result<RunMetrics> {
    fs::create_dir_all(run_dir)?;
    let _ = fs::remove_file(run_dir.join("error.txt"));
    let _ = fs::remove_file(run_dir.join("metrics.json"));

    let outcome = train(cfg, &data.train, &data.val)?;

    let mut history = String::from("epoch,train_loss,val_mse\n");
    for e in &outcome.history {
        history.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_mse));
    }
    fs::write(run_dir.join("history.csv"), history)?;

    checkpoint::save(&run_dir.join("checkpoint.txt"), &outcome.model, Some(&data.normalizer))?;

    let eval = evaluate(cfg, &outcome.model, &data.test)?;
    let dump = render_predictions(&eval, &data.test, cfg.hyper.tau, &data.normalizer);
    fs::write(run_dir.join("predictions.csv"), dump)?;

    let metrics = RunMetrics {
        variant: cfg.variant.to_string(),
        tau: cfg.hyper.tau,
        seed: cfg.seed,
        mse: eval.mse,
        mae: eval.mae,
        incidents: outcome.incidents,
        config_hash: config_hash.to_string(),
    };
    let mut json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| Error::Config(format!("metrics serialization: {}", e)))?;
    json.push('\n');
    fs::write(run_dir.join("metrics.json"), json)?;
    Ok(metrics)
}

/// Render prediction rows in the original data scale, keeping one window
/// per horizon length to bound file size.
pub fn render_predictions(
    eval: &EvalResult,
    windows: &[TimeSeriesWindow],
    tau: usize,
    n: &Normalizer,
) -> String {
    let keep: BTreeSet<usize> = windows.iter().step_by(tau).map(|w| w.start).collect();
    let mut dump = String::from("window_start,step,y_true,y_f,y_b,y_d\n");
    for row in eval.rows.iter().filter(|r| keep.contains(&r.window_start)) {
        let y_b = row.y_b.map(|b| n.invert_value(b).to_string()).unwrap_or_default();
        dump.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.window_start,
            row.step,
            n.invert_value(row.y_true),
            n.invert_value(row.y_f),
            y_b,
            n.invert_value(row.y_d),
        ));
    }
    dump
}

/// Run exactly one (variant, tau, seed) cell into the config's `out_dir`,
/// preparing the dataset on the fly.
pub fn run_one(
    config: &ExperimentConfig,
    variant: Variant,
    tau: usize,
    seed: u64,
) -> Result<RunMetrics> {
    config.validate()?;
    let hash = config.config_hash()?;
    let data = prepare_dataset(&config.dataset, config.kappa, tau, config.stride)?;
    let cfg = config.train_config(variant, tau, seed);
    let run_dir = config.out_dir.join(run_dir_name(variant, tau, seed));
    run_single(&cfg, &data, &run_dir, &hash)
}

/// A grid cell that did not finish, with the error it stopped on.
#[derive(Debug, Clone)]
pub struct RunFailure {
    pub variant: String,
    pub tau: usize,
    pub seed: u64,
    pub message: String,
}

pub struct ExperimentOutcome {
    pub runs: Vec<RunMetrics>,
    pub failures: Vec<RunFailure>,
    pub report: Vec<MetricReport>,
    pub report_path: PathBuf,
}

/// Train the full (variant, tau, seed) grid, then reduce to `report.csv`.
///
/// Runs execute on up to `BLURCAST_THREADS` worker threads (default: the
/// machine's available parallelism). Each run is seeded independently, so
/// the thread count changes wall time and nothing else. A failed run is
/// recorded (and noted in its run directory as `error.txt`); the report
/// aggregates whatever seeds completed and a warning names each short
/// group.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let hash = config.config_hash()?;
    let variants = config.variants()?;
    let taus = config.taus()?;
    let seeds = config.seeds()?;

    fs::create_dir_all(&config.out_dir)?;
    let mut ser = serde_json::to_string_pretty(config)
        .map_err(|e| Error::Config(format!("config serialization: {}", e)))?;
    ser.push('\n');
    fs::write(config.out_dir.join("config.json"), ser)?;

    let mut prepared: BTreeMap<usize, PreparedData> = BTreeMap::new();
    for &tau in &taus {
        prepared.insert(tau, prepare_dataset(&config.dataset, config.kappa, tau, config.stride)?);
    }

    let mut grid = Vec::new();
    for &variant in &variants {
        for &tau in &taus {
            for &seed in &seeds {
                grid.push((variant, tau, seed));
            }
        }
    }

    let workers = worker_count()?.min(grid.len());
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunMetrics>>>> =
        Mutex::new((0..grid.len()).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= grid.len() {
                    break;
                }
                let (variant, tau, seed) = grid[i];
                let cfg = config.train_config(variant, tau, seed);
                let run_dir = config.out_dir.join(run_dir_name(variant, tau, seed));
                let res = run_single(&cfg, &prepared[&tau], &run_dir, &hash);
                if let Err(e) = &res {
                    let _ = fs::write(run_dir.join("error.txt"), format!("{}\n", e));
                }
                slots.lock().unwrap()[i] = Some(res);
            });
        }
    });

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (i, slot) in slots.into_inner().unwrap().into_iter().enumerate() {
        let (variant, tau, seed) = grid[i];
        match slot.expect("worker filled every slot") {
            Ok(m) => runs.push(m),
            Err(e) => {
                eprintln!("warning: run {} tau {} seed {} failed: {}", variant, tau, seed, e);
                failures.push(RunFailure {
                    variant: variant.to_string(),
                    tau,
                    seed,
                    message: e.to_string(),
                });
            }
        }
    }
    if runs.is_empty() {
        return Err(Error::Config("every run in the experiment failed".into()));
    }

    let report = aggregate_report(&runs);
    for group in &report {
        if group.seeds.len() < seeds.len() {
            eprintln!(
                "warning: {} tau {}: only {} of {} seeds completed",
                group.variant,
                group.tau,
                group.seeds.len(),
                seeds.len()
            );
        }
    }
    let report_path = config.out_dir.join("report.csv");
    write_report(&report_path, &report)?;
    Ok(ExperimentOutcome { runs, failures, report, report_path })
}

/// Mean and standard error over seeds for one (variant, horizon) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub variant: String,
    pub tau: usize,
    pub seeds: Vec<u64>,
    pub mse_mean: f64,
    pub mse_stderr: f64,
    pub mae_mean: f64,
    pub mae_stderr: f64,
    pub config_hash: String,
}

/// Group per-run metrics by (variant, horizon) and reduce each group to
/// mean ± stderr over its seeds. Rows come out sorted by variant tag then
/// horizon, seeds ascending within a group, so the same set of runs always
/// renders the same report no matter where it came from.
pub fn aggregate_report(runs: &[RunMetrics]) -> Vec<MetricReport> {
    let mut groups: BTreeMap<(String, usize), Vec<&RunMetrics>> = BTreeMap::new();
    for run in runs {
        groups.entry((run.variant.clone(), run.tau)).or_default().push(run);
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((variant, tau), mut members) in groups {
        members.sort_by_key(|m| m.seed);
        let mses: Vec<f64> = members.iter().map(|m| m.mse).collect();
        let maes: Vec<f64> = members.iter().map(|m| m.mae).collect();
        let (mse_mean, mse_stderr) = mean_stderr(&mses);
        let (mae_mean, mae_stderr) = mean_stderr(&maes);
        let mut hashes: Vec<String> = members.iter().map(|m| m.config_hash.clone()).collect();
        hashes.sort();
        hashes.dedup();
        out.push(MetricReport {
            variant,
            tau,
            seeds: members.iter().map(|m| m.seed).collect(),
            mse_mean,
            mse_stderr,
            mae_mean,
            mae_stderr,
            config_hash: hashes.join(";"),
        });
    }
    out
}

pub fn render_report(report: &[MetricReport]) -> String {
    let mut out =
        String::from("variant,tau,seeds,mse_mean,mse_stderr,mae_mean,mae_stderr,config_hash\n");
    for r in report {
        let seeds: Vec<String> = r.seeds.iter().map(|s| s.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.tau,
            seeds.join(";"),
            r.mse_mean,
            r.mse_stderr,
            r.mae_mean,
            r.mae_stderr,
            r.config_hash
        ));
    }
    out
}

pub fn write_report(path: &Path, report: &[MetricReport]) -> Result<()> {
    fs::write(path, render_report(report))?;
    Ok(())
}

/// Rebuild the report from the `metrics.json` files under an experiment
/// directory, without retraining anything.
pub fn report_from_dir(out_dir: &Path) -> Result<Vec<MetricReport>> {
    let mut runs = Vec::new();
    for entry in fs::read_dir(out_dir)? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let path = entry.path().join("metrics.json");
        if !path.is_file() {
            continue;
        }
        let text = fs::read_to_string(&path)?;
        let run: RunMetrics = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        runs.push(run);
    }
    if runs.is_empty() {
        return Err(Error::Config(format!(
            "no run metrics found under {}",
            out_dir.display()
        )));
    }
    runs.sort_by(|a, b| {
        (a.variant.as_str(), a.tau, a.seed).cmp(&(b.variant.as_str(), b.tau, b.seed))
    });
    Ok(aggregate_report(&runs))
}

fn parse_worker_count(raw: Option<&str>) -> Result<usize> {
    match raw {
        None => Ok(thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
        Some(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "BLURCAST_THREADS must be a positive integer, got `{}`",
                s
            ))),
        },
    }
}

fn worker_count() -> Result<usize> {
    let raw = std::env::var("BLURCAST_THREADS").ok();
    parse_worker_count(raw.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;
    use crate::pipeline::ModelParams;

    fn minimal_json() -> &'static str {
        r#"{"dataset": {"kind": "sine-mix", "length": 2000}}"#
    }

    fn tiny_config(out_dir: PathBuf) -> ExperimentConfig {
        ExperimentConfig {
            variant: OneOrMany::Many(vec!["FORECAST_ONLY".into(), "RB".into()]),
            kappa: 8,
            tau: OneOrMany::One(4),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            m_inducing: 4,
            lambda: 0.001,
            batch: 16,
            epochs: 1,
            warmup: 100,
            seed: OneOrMany::Many(vec![1, 2]),
            eval_samples: 1,
            dataset: DatasetSpec::Synthetic {
                kind: "sine-mix".into(),
                length: 120,
                noise: 0.05,
                seed: 3,
            },
            stride: 1,
            out_dir,
            detach_blur: false,
            blur_per_epoch: false,
            per_series: true,
        }
    }

    #[test]
    fn minimal_config_fills_desk_scale_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(minimal_json()).unwrap();
        assert_eq!(cfg.variants().unwrap(), Variant::ALL.to_vec());
        assert_eq!(cfg.taus().unwrap(), vec![12]);
        assert_eq!(cfg.seeds().unwrap(), vec![0, 1, 2]);
        assert_eq!(cfg.kappa, 48);
        assert_eq!(cfg.d_model, 16);
        assert_eq!(cfg.n_heads, 8);
        assert_eq!(cfg.m_inducing, 4);
        assert_eq!(cfg.lambda, 0.001);
        assert_eq!(cfg.batch, 64);
        assert_eq!(cfg.epochs, 50);
        assert_eq!(cfg.warmup, 1000);
        assert_eq!(cfg.eval_samples, 1);
        assert_eq!(cfg.stride, 1);
        assert!(cfg.per_series);
        cfg.validate().unwrap();
    }

    #[test]
    fn scalar_and_list_fields_both_parse() {
        let json = r#"{
            "variant": "DG",
            "tau": [12, 24],
            "seed": 7,
            "M": 6,
            "dataset": {"csv": "series.csv", "target_column": "value",
                        "timestamp_column": "timestamp"}
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.variants().unwrap(), vec![Variant::DenoiseGp]);
        assert_eq!(cfg.taus().unwrap(), vec![12, 24]);
        assert_eq!(cfg.seeds().unwrap(), vec![7]);
        assert_eq!(cfg.m_inducing, 6);
        match &cfg.dataset {
            DatasetSpec::Csv { csv, .. } => assert_eq!(csv, &PathBuf::from("series.csv")),
            other => panic!("parsed as {:?}", other),
        }
    }

    #[test]
    fn bad_configs_are_rejected_with_context() {
        let unknown = r#"{"dataset": {"kind": "sine-mix", "length": 100}, "depth": 3}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(unknown).is_err());

        let dup_seed = r#"{"dataset": {"kind": "sine-mix", "length": 100}, "seed": [1, 1]}"#;
        let cfg: ExperimentConfig = serde_json::from_str(dup_seed).unwrap();
        let err = cfg.seeds().unwrap_err().to_string();
        assert!(err.contains("duplicate seed 1"), "{}", err);

        let bad_kind = r#"{"dataset": {"kind": "brownian", "length": 100}}"#;
        let cfg: ExperimentConfig = serde_json::from_str(bad_kind).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_hash_tracks_substance_not_seeds() {
        let a = tiny_config(PathBuf::from("a"));
        let mut b = tiny_config(PathBuf::from("b"));
        b.seed = OneOrMany::Many(vec![5, 6, 7]);
        assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
        assert_eq!(a.config_hash().unwrap().len(), 12);

        let mut c = tiny_config(PathBuf::from("a"));
        c.lambda = 0.5;
        assert_ne!(a.config_hash().unwrap(), c.config_hash().unwrap());
    }

    #[test]
    fn normalized_and_round_tripped_metrics_agree() {
        let spec =
            DatasetSpec::Synthetic { kind: "sine-mix".into(), length: 60, noise: 0.1, seed: 0 };
        let data = prepare_dataset(&spec, 8, 4, 1).unwrap();
        let cfg = tiny_config(PathBuf::new()).train_config(Variant::ForecastOnly, 4, 1);
        let model = ModelParams::init(cfg.variant, &cfg.hyper, cfg.m_inducing, 5).unwrap();
        let eval = evaluate(&cfg, &model, &data.test).unwrap();

        let n = &data.normalizer;
        let trip = |v: f64| n.apply_value(n.invert_value(v));
        let (mut se, mut ae) = (0.0, 0.0);
        for row in &eval.rows {
            let d = trip(row.y_d) - trip(row.y_true);
            se += d * d;
            ae += d.abs();
        }
        let mse = se / eval.rows.len() as f64;
        let mae = ae / eval.rows.len() as f64;
        assert!((mse - eval.mse).abs() < 1e-10, "{} vs {}", mse, eval.mse);
        assert!((mae - eval.mae).abs() < 1e-10, "{} vs {}", mae, eval.mae);
    }

    #[test]
    fn experiment_writes_artifacts_and_report_reaggregates() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path().join("runs"));
        let outcome = run_experiment(&config).unwrap();

        assert_eq!(outcome.runs.len(), 4);
        assert!(outcome.failures.is_empty());
        assert_eq!(outcome.report.len(), 2);
        assert_eq!(outcome.report[0].variant, "FORECAST_ONLY");
        assert_eq!(outcome.report[1].variant, "RB");
        assert_eq!(outcome.report[0].seeds, vec![1, 2]);

        let run_dir = config.out_dir.join("FORECAST_ONLY_tau4_seed1");
        for file in ["history.csv", "checkpoint.txt", "predictions.csv", "metrics.json"] {
            assert!(run_dir.join(file).is_file(), "missing {}", file);
        }
        assert!(config.out_dir.join("config.json").is_file());
        let written = fs::read_to_string(&outcome.report_path).unwrap();
        assert_eq!(written, render_report(&outcome.report));

        let again = report_from_dir(&config.out_dir).unwrap();
        assert_eq!(again, outcome.report);
    }

    #[test]
    fn failed_runs_leave_the_rest_standing() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path().join("runs"));
        config.variant = OneOrMany::One("FORECAST_ONLY".into());
        fs::create_dir_all(&config.out_dir).unwrap();
        // a file squatting on the run directory makes that run fail
        fs::write(config.out_dir.join("FORECAST_ONLY_tau4_seed1"), "blocked").unwrap();

        let outcome = run_experiment(&config).unwrap();
        assert_eq!(outcome.runs.len(), 1);
        assert_eq!(outcome.failures.len(), 1);
        assert_eq!(outcome.failures[0].seed, 1);
        assert_eq!(outcome.report.len(), 1);
        assert_eq!(outcome.report[0].seeds, vec![2]);
        assert_eq!(outcome.report[0].mse_stderr, 0.0);
    }

    #[test]
    fn worker_count_env_values_parse_or_fail_loudly() {
        assert_eq!(parse_worker_count(Some("3")).unwrap(), 3);
        assert_eq!(parse_worker_count(Some(" 8 ")).unwrap(), 8);
        assert!(parse_worker_count(None).unwrap() >= 1);
        assert!(parse_worker_count(Some("0")).is_err());
        assert!(parse_worker_count(Some("two")).is_err());
        assert!(parse_worker_count(Some("-1")).is_err());
    }

    #[test]
    fn single_seed_report_has_zero_stderr_and_two_seeds_hand_check() {
        let one = vec![RunMetrics {
            variant: "DG".into(),
            tau: 12,
            seed: 0,
            mse: 0.5,
            mae: 0.4,
            incidents: 0,
            config_hash: "abc".into(),
        }];
        let rep = aggregate_report(&one);
        assert_eq!(rep[0].mse_stderr, 0.0);
        assert_eq!(rep[0].mae_stderr, 0.0);

        let two = vec![
            RunMetrics { seed: 1, mse: 0.3, mae: 0.2, ..one[0].clone() },
            RunMetrics { seed: 2, mse: 0.5, mae: 0.6, ..one[0].clone() },
        ];
        let rep = aggregate_report(&two);
        assert_eq!(rep.len(), 1);
        assert!((rep[0].mse_mean - 0.4).abs() < 1e-15);
        let (_, expect_stderr) = metrics::mean_stderr(&[0.3, 0.5]);
        assert_eq!(rep[0].mse_stderr, expect_stderr);
        assert_eq!(rep[0].seeds, vec![1, 2]);
    }
}
