//! `blurcast`: train, evaluate, and ablate forecast-blur-denoise models.
//!
//! Subcommands: `synth-data` writes a synthetic series to CSV, `train` runs
//! one (variant, horizon, seed) cell, `eval` scores a saved checkpoint,
//! `ablate` sweeps the config's whole grid and writes a report, and
//! `report` rebuilds that report from run directories on disk.
//!
//! Bad flags or subcommands exit 2 with usage text; runtime failures exit 1
//! with a single `error: ...` line on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use blurcast_core::checkpoint;
use blurcast_core::data::{
    fit_normalizer, make_windows, split_train_val_test, synth_series, write_csv, SeriesKind,
    WindowConfig,
};
use blurcast_core::experiment::{
    load_series, render_predictions, render_report, report_from_dir, run_experiment, run_one,
    write_report, ExperimentConfig, OneOrMany,
};
use blurcast_core::pipeline::evaluate;

#[derive(Parser)]
#[command(name = "blurcast", version, about = "Forecast-blur-denoise experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hourly series and write it as CSV
    SynthData(SynthDataArgs),
    /// Train one variant on one horizon and seed, leaving run artifacts
    Train(TrainArgs),
    /// Score a checkpoint on the config's test split
    Eval(EvalArgs),
    /// Train the config's full variant × horizon × seed grid and write a report
    Ablate(AblateArgs),
    /// Rebuild report.csv from run directories without retraining
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthDataArgs {
    /// Generator: sine-mix, trend-seasonal, or sawtooth
    #[arg(long)]
    kind: String,
    /// Number of hourly steps
    #[arg(long)]
    length: usize,
    /// Gaussian noise scale added to the clean signal
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV path to write
    #[arg(long)]
    out: PathBuf,
}

/// Flags that narrow or adjust a config file for one invocation.
#[derive(Args)]
struct Overrides {
    /// Treatment variant: FORECAST_ONLY, DG, DI, DWC, RB, or DT
    #[arg(long)]
    variant: Option<String>,
    /// Training seed
    #[arg(long)]
    seed: Option<u64>,
    /// Forecast horizon
    #[arg(long)]
    tau: Option<usize>,
    /// Blur draws averaged per prediction at evaluation time
    #[arg(long)]
    eval_samples: Option<usize>,
    /// Directory for run artifacts (overrides the config's out_dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep the evidence bound from pushing gradients into the forecaster
    #[arg(long = "detach-blur-from-forecaster")]
    detach_blur_from_forecaster: bool,
    /// Draw one blur corruption per epoch instead of per forward pass
    #[arg(long)]
    blur_per_epoch: bool,
    /// Average metrics per series before pooling (single-series datasets
    /// are unaffected)
    #[arg(long)]
    per_series: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = &self.variant {
            cfg.variant = OneOrMany::One(v.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = OneOrMany::One(s);
        }
        if let Some(t) = self.tau {
            cfg.tau = OneOrMany::One(t);
        }
        if let Some(n) = self.eval_samples {
            cfg.eval_samples = n;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if self.detach_blur_from_forecaster {
            cfg.detach_blur = true;
        }
        if self.blur_per_epoch {
            cfg.blur_per_epoch = true;
        }
        if self.per_series {
            cfg.per_series = true;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file written by train or ablate
    checkpoint: PathBuf,
    /// Experiment config naming the dataset to score on
    #[arg(long)]
    config: PathBuf,
    /// Evaluation seed (defaults to the config's first seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Blur draws averaged per prediction
    #[arg(long)]
    eval_samples: Option<usize>,
    /// Also write a prediction dump CSV here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ReportArgs {
    /// Experiment directory holding the run subdirectories
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config whose out_dir to aggregate (when --out is not given)
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::SynthData(args) => synth_data(args),
        Command::Train(args) => train_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::Ablate(args) => ablate_cmd(args),
        Command::Report(args) => report_cmd(args),
    }
}

fn load_config(path: &PathBuf, overrides: Option<&Overrides>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(o) = overrides {
        o.apply(&mut cfg);
    }
    Ok(cfg)
}

fn synth_data(args: SynthDataArgs) -> anyhow::Result<()> {
    let kind: SeriesKind = args.kind.parse()?;
    let series = synth_series(kind, args.length, args.seed, args.noise);
    write_csv(&series, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {} rows to {}", series.len(), args.out.display());
    Ok(())
}

fn train_cmd(args: TrainArgs) -> anyhow::Result<()> {
    let config = load_config(&args.config, Some(&args.overrides))?;
    let variants = config.variants()?;
    let taus = config.taus()?;
    let seeds = config.seeds()?;
    if variants.len() != 1 {
        bail!("config resolves to {} variants; train runs one (pass --variant)", variants.len());
    }
    if taus.len() != 1 {
        bail!("config resolves to {} horizons; train runs one (pass --tau)", taus.len());
    }
    if seeds.len() != 1 {
        bail!("config resolves to {} seeds; train runs one (pass --seed)", seeds.len());
    }
    let (variant, tau, seed) = (variants[0], taus[0], seeds[0]);
    let metrics = run_one(&config, variant, tau, seed)?;
    println!(
        "{} tau {} seed {}: test mse {} mae {} ({} rejected steps), artifacts in {}",
        variant,
        tau,
        seed,
        metrics.mse,
        metrics.mae,
        metrics.incidents,
        config.out_dir.join(blurcast_core::experiment::run_dir_name(variant, tau, seed)).display()
    );
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> anyhow::Result<()> {
    let config = load_config(&args.config, None)?;
    let loaded = checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let hyper = loaded.model.forecaster.hyper;

    let series = load_series(&config.dataset)?;
    let windows = make_windows(&series, &WindowConfig::new(hyper.kappa, hyper.tau, config.stride)?)?;
    let (train_w, _, test_w) = split_train_val_test(windows)?;
    // score in the scale the checkpoint was trained in; fall back to
    // refitting on this dataset's training split for bare checkpoints
    let normalizer = match loaded.normalizer {
        Some(n) => n,
        None => fit_normalizer(&train_w)?,
    };
    let test = normalizer.apply_all(&test_w);

    let seed = args.seed.unwrap_or_else(|| config.seeds().map(|s| s[0]).unwrap_or(0));
    let mut cfg = config.train_config(loaded.model.variant, hyper.tau, seed);
    cfg.hyper = hyper;
    if let Some(n) = args.eval_samples {
        cfg.eval_samples = n;
    }

    let eval = evaluate(&cfg, &loaded.model, &test)?;
    if let Some(out) = &args.out {
        let dump = render_predictions(&eval, &test, hyper.tau, &normalizer);
        std::fs::write(out, dump).with_context(|| format!("writing {}", out.display()))?;
    }
    println!(
        "{} tau {}: test mse {} mae {} over {} windows",
        loaded.model.variant,
        hyper.tau,
        eval.mse,
        eval.mae,
        test.len()
    );
    Ok(())
}

fn ablate_cmd(args: AblateArgs) -> anyhow::Result<()> {
    let config = load_config(&args.config, Some(&args.overrides))?;
    let outcome = run_experiment(&config)?;
    print!("{}", render_report(&outcome.report));
    println!("report written to {}", outcome.report_path.display());
    if !outcome.failures.is_empty() {
        println!("{} of {} runs failed (see error.txt in their directories)",
            outcome.failures.len(),
            outcome.failures.len() + outcome.runs.len()
        );
    }
    Ok(())
}

fn report_cmd(args: ReportArgs) -> anyhow::Result<()> {
    let out_dir = match (&args.out, &args.config) {
        (Some(out), _) => out.clone(),
        (None, Some(cfg)) => load_config(cfg, None)?.out_dir,
        (None, None) => bail!("report needs --out or --config to find run directories"),
    };
    let report = report_from_dir(&out_dir)?;
    let path = out_dir.join("report.csv");
    write_report(&path, &report)?;
    print!("{}", render_report(&report));
    println!("report written to {}", path.display());
    Ok(())
}
