//! Compound forecast-blur-denoise pipeline, treatment variants, optimizer,
//! and training loop.
//!
//! A treatment decides how the three submodels combine. The plain forecast
//! path trains the forecaster alone; the corrupting treatments pass the
//! forecast through a GP or isotropic blur and train a denoiser on top; one
//! treatment denoises without corruption; one boosts the forecast with a
//! residual predictor; and one blurs during training only, switching to the
//! uncorrupted denoise path at evaluation time.
//!
//! The training loss is `MSE(final output, target) + lambda * (-bound)` for
//! treatments carrying a noise model, where the bound is the GP evidence
//! bound (or its isotropic counterpart). Everything trains jointly under a
//! single Adam state with the inverse-square-root warmup schedule.

use rand_chacha::rand_core::RngCore;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::str::FromStr;

use crate::data::TimeSeriesWindow;
use crate::error::{Error, Result};
use crate::forecaster::{self, ForecasterHyper, ForecasterParams, ForecasterVars};
use crate::gp_blur::{self, GpBlurParams, GpVars};
use crate::rng::{self, TAG_BLUR, TAG_EVAL, TAG_SHUFFLE};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const GRAD_CLIP: f64 = 10.0;
const ROLE_FORECASTER: u64 = 0;
const ROLE_AUX: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    ForecastOnly,
    DenoiseGp,
    DenoiseIsotropic,
    DenoiseWithoutCorruption,
    ResidualBoost,
    DenoiseTrainOnly,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::ForecastOnly,
        Variant::DenoiseGp,
        Variant::DenoiseIsotropic,
        Variant::DenoiseWithoutCorruption,
        Variant::ResidualBoost,
        Variant::DenoiseTrainOnly,
    ];

    pub fn needs_gp(self) -> bool {
        matches!(self, Variant::DenoiseGp | Variant::DenoiseIsotropic | Variant::DenoiseTrainOnly)
    }

    pub fn needs_aux(self) -> bool {
        !matches!(self, Variant::ForecastOnly)
    }

    /// Whether a forward pass in the given mode consumes blur noise.
    pub fn blurs(self, mode: Mode) -> bool {
        match self {
            Variant::DenoiseGp | Variant::DenoiseIsotropic => true,
            Variant::DenoiseTrainOnly => mode == Mode::Train,
            _ => false,
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "FORECAST_ONLY" => Ok(Variant::ForecastOnly),
            "DG" => Ok(Variant::DenoiseGp),
            "DI" => Ok(Variant::DenoiseIsotropic),
            "DWC" => Ok(Variant::DenoiseWithoutCorruption),
            "RB" => Ok(Variant::ResidualBoost),
            "DT" => Ok(Variant::DenoiseTrainOnly),
            other => Err(Error::Config(format!(
                "unknown variant `{}` (expected FORECAST_ONLY, DG, DI, DWC, RB, or DT)",
                other
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::ForecastOnly => "FORECAST_ONLY",
            Variant::DenoiseGp => "DG",
            Variant::DenoiseIsotropic => "DI",
            Variant::DenoiseWithoutCorruption => "DWC",
            Variant::ResidualBoost => "RB",
            Variant::DenoiseTrainOnly => "DT",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Full parameter state for one experiment run. `aux` is the denoiser for
/// the denoising treatments and the residual predictor for the boosted one.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub variant: Variant,
    pub forecaster: ForecasterParams,
    pub gp: Option<GpBlurParams>,
    pub aux: Option<ForecasterParams>,
}

impl ModelParams {
    pub fn init(variant: Variant, hyper: &ForecasterHyper, m_inducing: usize, seed: u64) -> Result<Self> {
        let forecaster = forecaster::init_params(hyper, seed, ROLE_FORECASTER)?;
        let gp = variant.needs_gp().then(|| GpBlurParams::init(m_inducing));
        let aux = if variant.needs_aux() {
            Some(forecaster::init_params(hyper, seed, ROLE_AUX)?)
        } else {
            None
        };
        Ok(ModelParams { variant, forecaster, gp, aux })
    }

    fn aux_prefix(&self) -> &'static str {
        if self.variant == Variant::ResidualBoost {
            "residual."
        } else {
            "denoiser."
        }
    }

    /// Every tensor with a stable fully-qualified name, in the canonical
    /// order shared by the optimizer and the checkpoint format.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, t) in self.forecaster.tensors() {
            out.push((format!("forecaster.{}", name), t));
        }
        if let Some(gp) = &self.gp {
            out.extend(gp.tensors());
        }
        if let Some(aux) = &self.aux {
            let prefix = self.aux_prefix();
            for (name, t) in aux.tensors() {
                out.push((format!("{}{}", prefix, name), t));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let prefix = self.aux_prefix();
        let mut out = Vec::new();
        for (name, t) in self.forecaster.tensors_mut() {
            out.push((format!("forecaster.{}", name), t));
        }
        if let Some(gp) = &mut self.gp {
            out.extend(gp.tensors_mut());
        }
        if let Some(aux) = &mut self.aux {
            for (name, t) in aux.tensors_mut() {
                out.push((format!("{}{}", prefix, name), t));
            }
        }
        out
    }

    pub fn enter(&self, tape: &mut Tape, trainable: bool) -> Result<ModelVars> {
        Ok(ModelVars {
            forecaster: self.forecaster.enter(tape, trainable)?,
            gp: match &self.gp {
                Some(gp) => Some(gp.enter(tape, trainable)?),
                None => None,
            },
            aux: match &self.aux {
                Some(aux) => Some(aux.enter(tape, trainable)?),
                None => None,
            },
        })
    }
}

/// Tape handles for [`ModelParams`], same canonical order.
pub struct ModelVars {
    pub forecaster: ForecasterVars,
    pub gp: Option<GpVars>,
    pub aux: Option<ForecasterVars>,
}

impl ModelVars {
    pub fn all_vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.forecaster.all().to_vec();
        if let Some(gp) = &self.gp {
            out.extend(gp.all());
        }
        if let Some(aux) = &self.aux {
            out.extend(aux.all());
        }
        out
    }

    fn gp_vars(&self, variant: Variant) -> Result<&GpVars> {
        self.gp
            .as_ref()
            .ok_or_else(|| Error::Config(format!("variant {} requires blur parameters", variant)))
    }

    fn aux_vars(&self, variant: Variant) -> Result<&ForecasterVars> {
        self.aux
            .as_ref()
            .ok_or_else(|| Error::Config(format!("variant {} requires a second model", variant)))
    }
}

/// A batch of same-shaped windows registered on a tape as untracked inputs,
/// rows stacked window-major. Forward passes treat each window as one
/// attention block, so the whole batch shares a single tape.
pub struct BatchVars {
    pub x_past: Var,
    pub cov_future: Var,
    pub y_true: Var,
    pub batch: usize,
}

pub fn enter_batch(tape: &mut Tape, windows: &[&TimeSeriesWindow]) -> Result<BatchVars> {
    if windows.is_empty() {
        return Err(Error::Dataset("empty window batch".into()));
    }
    let stack = |pick: fn(&TimeSeriesWindow) -> &Tensor| -> Result<Tensor> {
        let first = pick(windows[0]);
        let mut data = Vec::with_capacity(windows.len() * first.numel());
        for w in windows {
            let t = pick(w);
            if t.shape() != first.shape() {
                return Err(Error::ShapeMismatch {
                    op: "enter_batch",
                    detail: format!("{:?} vs {:?} in one batch", t.shape(), first.shape()),
                });
            }
            data.extend_from_slice(t.data());
        }
        Tensor::new(vec![windows.len() * first.rows(), first.cols()], data)
    };
    Ok(BatchVars {
        x_past: tape.constant(stack(|w| &w.x_past)?)?,
        cov_future: tape.constant(stack(|w| &w.cov_future)?)?,
        y_true: tape.constant(stack(|w| &w.y_future)?)?,
        batch: windows.len(),
    })
}

pub fn enter_window(tape: &mut Tape, w: &TimeSeriesWindow) -> Result<BatchVars> {
    enter_batch(tape, &[w])
}

pub struct PipelineOutput {
    pub y_f: Var,
    pub y_b: Option<Var>,
    pub y_d: Var,
}

/// Run a window batch through the treatment's forward path. `eps` supplies
/// the standard-normal draws for treatments that corrupt in this mode, one
/// horizon-length slice per window back to back (ignored otherwise).
pub fn compound_forward(
    tape: &mut Tape,
    variant: Variant,
    mode: Mode,
    model: &ModelVars,
    win: &BatchVars,
    eps: &[f64],
) -> Result<PipelineOutput> {
    let b = win.batch;
    let y_f = forecaster::forecast(tape, &model.forecaster, win.x_past, win.cov_future, b)?;
    match variant {
        Variant::ForecastOnly => Ok(PipelineOutput { y_f, y_b: None, y_d: y_f }),
        Variant::DenoiseWithoutCorruption => {
            let aux = model.aux_vars(variant)?;
            let y_d = forecaster::denoise(tape, aux, win.x_past, win.cov_future, y_f, b)?;
            Ok(PipelineOutput { y_f, y_b: None, y_d })
        }
        Variant::DenoiseGp | Variant::DenoiseIsotropic => {
            let gp = model.gp_vars(variant)?;
            let aux = model.aux_vars(variant)?;
            let sample = if variant == Variant::DenoiseGp {
                gp_blur::blur_sample(tape, y_f, gp, eps, b)?
            } else {
                gp_blur::isotropic_sample(tape, y_f, gp.log_noise_var, eps)?
            };
            let y_d = forecaster::denoise(tape, aux, win.x_past, win.cov_future, sample.y_blurred, b)?;
            Ok(PipelineOutput { y_f, y_b: Some(sample.y_blurred), y_d })
        }
        Variant::DenoiseTrainOnly => {
            let aux = model.aux_vars(variant)?;
            if mode == Mode::Train {
                let gp = model.gp_vars(variant)?;
                let sample = gp_blur::blur_sample(tape, y_f, gp, eps, b)?;
                let y_d =
                    forecaster::denoise(tape, aux, win.x_past, win.cov_future, sample.y_blurred, b)?;
                Ok(PipelineOutput { y_f, y_b: Some(sample.y_blurred), y_d })
            } else {
                let y_d = forecaster::denoise(tape, aux, win.x_past, win.cov_future, y_f, b)?;
                Ok(PipelineOutput { y_f, y_b: None, y_d })
            }
        }
        Variant::ResidualBoost => {
            let aux = model.aux_vars(variant)?;
            let residual = forecaster::forecast(tape, aux, win.x_past, win.cov_future, b)?;
            let y_d = tape.add(y_f, residual)?;
            Ok(PipelineOutput { y_f, y_b: None, y_d })
        }
    }
}

fn mse_var(tape: &mut Tape, pred: Var, truth: Var) -> Result<Var> {
    let diff = tape.sub(pred, truth)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// The treatment's noise-model objective (to be maximized), if it has one:
/// the GP evidence bound for the correlated blur, the exact isotropic
/// Gaussian log likelihood for the uncorrelated one. Batches average the
/// per-window objective. With `detach_blur` the residual is computed
/// against a detached forecast, so fitting the noise model stops pulling on
/// the forecaster.
pub fn regularizer_term(
    tape: &mut Tape,
    variant: Variant,
    model: &ModelVars,
    win: &BatchVars,
    out: &PipelineOutput,
    detach_blur: bool,
) -> Result<Option<Var>> {
    if !variant.needs_gp() {
        return Ok(None);
    }
    let gp = model.gp_vars(variant)?;
    let y_f = if detach_blur { tape.detach(out.y_f)? } else { out.y_f };
    if variant == Variant::DenoiseIsotropic {
        // the diagonal log likelihood factorizes over windows, so the
        // stacked residual already carries the per-window sum
        let total = gp_blur::isotropic_loglik(tape, win.y_true, y_f, gp.log_noise_var)?;
        return Ok(Some(per_window_mean(tape, total, win.batch)?));
    }
    let tau = tape.value(y_f).rows() / win.batch;
    let mut acc: Option<Var> = None;
    for b in 0..win.batch {
        let yt = tape.slice_rows(win.y_true, b * tau, tau)?;
        let yf = tape.slice_rows(y_f, b * tau, tau)?;
        let e = gp_blur::svgp_elbo(tape, yt, yf, gp)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, e)?,
            None => e,
        });
    }
    let total = acc.expect("nonempty batch");
    Ok(Some(per_window_mean(tape, total, win.batch)?))
}

fn per_window_mean(tape: &mut Tape, total: Var, batch: usize) -> Result<Var> {
    if batch == 1 {
        Ok(total)
    } else {
        tape.scale(total, 1.0 / batch as f64)
    }
}

/// Scalar training loss. The boosted treatment sums the forecast and
/// boosted errors; treatments with a noise model subtract `lambda` times
/// their bound; everything else is plain MSE on the final output.
pub fn compound_loss(
    tape: &mut Tape,
    variant: Variant,
    out: &PipelineOutput,
    win: &BatchVars,
    bound: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    if variant == Variant::ResidualBoost {
        let base = mse_var(tape, out.y_f, win.y_true)?;
        let boosted = mse_var(tape, out.y_d, win.y_true)?;
        return tape.add(base, boosted);
    }
    let mse = mse_var(tape, out.y_d, win.y_true)?;
    match bound {
        Some(b) if lambda != 0.0 => {
            let neg = tape.neg(b)?;
            let weighted = tape.scale(neg, lambda)?;
            tape.add(mse, weighted)
        }
        _ => Ok(mse),
    }
}

/// Inverse-square-root decay with linear warmup, scaled by the model width.
pub fn lr_schedule(step: usize, warmup: usize, d_model: usize) -> Result<f64> {
    if step == 0 || warmup == 0 || d_model == 0 {
        return Err(Error::Config(format!(
            "lr schedule needs positive step/warmup/d_model (got {}, {}, {})",
            step, warmup, d_model
        )));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok((d_model as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5)))
}

/// What [`AdamState::step`] did with a proposed update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    RejectedNonFinite,
}

/// Bias-corrected Adam with global gradient-norm clipping and the schedule
/// above. Moments are kept in the canonical parameter order.
pub struct AdamState {
    pub step: usize,
    pub warmup: usize,
    pub d_model: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

impl AdamState {
    pub fn new(shapes: &[Vec<usize>], warmup: usize, d_model: usize) -> Self {
        AdamState {
            step: 0,
            warmup,
            d_model,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// Apply one update in place. A non-finite gradient rejects the step
    /// without touching parameters, moments, or the step counter.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<StepOutcome> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                detail: format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            });
        }
        let norm = global_grad_norm(grads);
        if !norm.is_finite() {
            return Ok(StepOutcome::RejectedNonFinite);
        }
        let clip = if norm > GRAD_CLIP { GRAD_CLIP / norm } else { 1.0 };
        self.step += 1;
        let lr = lr_schedule(self.step, self.warmup, self.d_model)?;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i] * clip;
                md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * gi;
                vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// Euclidean norm over all gradient tensors, compensated summation.
pub fn global_grad_norm(grads: &[Tensor]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for g in grads {
        for x in g.data() {
            let term = x * x;
            let t = sum + term;
            comp += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
            sum = t;
        }
    }
    (sum + comp).sqrt()
}

/// Everything one training run needs besides the data.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub variant: Variant,
    pub hyper: ForecasterHyper,
    pub m_inducing: usize,
    pub lambda: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup: usize,
    pub seed: u64,
    pub eval_samples: usize,
    pub detach_blur: bool,
    pub blur_per_epoch: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.batch == 0 || self.epochs == 0 || self.warmup == 0 || self.eval_samples == 0 {
            return Err(Error::Config("batch, epochs, warmup, eval_samples must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.m_inducing == 0 || self.m_inducing > self.hyper.tau {
            return Err(Error::Config(format!(
                "inducing count {} must be in 1..={} (the horizon)",
                self.m_inducing, self.hyper.tau
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
}

pub struct TrainOutcome {
    /// Parameters at the best validation epoch.
    pub model: ModelParams,
    pub history: Vec<EpochStats>,
    /// Rejected optimizer steps (non-finite losses or gradients).
    pub incidents: usize,
}

fn fisher_yates(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    order
}

/// Jointly train all parameter sets of the treatment. Deterministic per
/// config: shuffles, blur draws, and validation draws all derive from the
/// seed, so equal configs give bit-identical histories.
pub fn train(
    cfg: &TrainConfig,
    train_windows: &[TimeSeriesWindow],
    val_windows: &[TimeSeriesWindow],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_windows.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let mut model = ModelParams::init(cfg.variant, &cfg.hyper, cfg.m_inducing, cfg.seed)?;
    let shapes: Vec<Vec<usize>> =
        model.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut adam = AdamState::new(&shapes, cfg.warmup, cfg.hyper.d_model);
    let tau = cfg.hyper.tau;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut incidents = 0usize;
    let mut best: Option<(f64, ModelParams)> = None;

    for epoch in 1..=cfg.epochs {
        let mut shuffle_rng = rng::stream(cfg.seed, &[TAG_SHUFFLE, epoch as u64]);
        let order = fisher_yates(train_windows.len(), &mut shuffle_rng);
        let epoch_eps: Option<Vec<f64>> = if cfg.blur_per_epoch && cfg.variant.blurs(Mode::Train) {
            let mut rng = rng::stream(cfg.seed, &[TAG_BLUR, epoch as u64]);
            Some(rng::standard_normals(&mut rng, tau))
        } else {
            None
        };

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let eps: Vec<f64> = if cfg.variant.blurs(Mode::Train) {
                match &epoch_eps {
                    Some(e) => chunk.iter().flat_map(|_| e.iter().copied()).collect(),
                    None => {
                        let mut all = Vec::with_capacity(chunk.len() * tau);
                        for &widx in chunk {
                            let mut rng =
                                rng::stream(cfg.seed, &[TAG_BLUR, epoch as u64, widx as u64]);
                            all.extend(rng::standard_normals(&mut rng, tau));
                        }
                        all
                    }
                }
            } else {
                Vec::new()
            };
            let windows: Vec<&TimeSeriesWindow> =
                chunk.iter().map(|&widx| &train_windows[widx]).collect();
            let (loss, grads) = match batch_loss_and_grads(cfg, &model, &windows, &eps) {
                Ok(pair) => pair,
                Err(Error::NonFinite { .. })
                | Err(Error::NotPositiveDefinite { .. })
                | Err(Error::LogNonPositive) => {
                    incidents += 1;
                    eprintln!(
                        "warning: rejected batch (non-finite forward) at epoch {}, continuing",
                        epoch
                    );
                    continue;
                }
                Err(other) => return Err(other),
            };
            let mut refs: Vec<&mut Tensor> =
                model.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
            match adam.step(&mut refs, &grads)? {
                StepOutcome::Applied => {}
                StepOutcome::RejectedNonFinite => {
                    incidents += 1;
                    eprintln!(
                        "warning: rejected optimizer step (non-finite gradient) at epoch {}, continuing",
                        epoch
                    );
                }
            }
            loss_sum += loss * chunk.len() as f64;
            loss_count += chunk.len();
        }

        let train_loss = if loss_count > 0 { loss_sum / loss_count as f64 } else { f64::INFINITY };
        let val_mse = validation_mse(cfg, &model, val_windows, epoch)?;
        history.push(EpochStats { epoch, train_loss, val_mse });
        let improved = match &best {
            Some((b, _)) => val_mse < *b,
            None => true,
        };
        if improved {
            best = Some((val_mse, model.clone()));
        }
    }

    let (_, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome { model: best_model, history, incidents })
}

/// Loss and canonical-order gradients for one batch, all windows on a
/// single tape. The batch loss averages per-window terms, so the gradient
/// is the per-window mean as well.
fn batch_loss_and_grads(
    cfg: &TrainConfig,
    model: &ModelParams,
    windows: &[&TimeSeriesWindow],
    eps: &[f64],
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = model.enter(&mut tape, true)?;
    let win = enter_batch(&mut tape, windows)?;
    let out = compound_forward(&mut tape, cfg.variant, Mode::Train, &vars, &win, eps)?;
    let bound = if cfg.lambda != 0.0 {
        regularizer_term(&mut tape, cfg.variant, &vars, &win, &out, cfg.detach_blur)?
    } else {
        None
    };
    let loss = compound_loss(&mut tape, cfg.variant, &out, &win, bound, cfg.lambda)?;
    let grads = tape.backward(loss)?;
    let flat: Vec<Tensor> = vars.all_vars().iter().map(|v| grads.wrt(*v, &tape)).collect();
    Ok((tape.value(loss).item(), flat))
}

/// Validation MSE of the evaluation-mode output, one blur draw per window
/// from the validation stream. Windows run in training-batch-sized chunks.
fn validation_mse(
    cfg: &TrainConfig,
    model: &ModelParams,
    val_windows: &[TimeSeriesWindow],
    epoch: usize,
) -> Result<f64> {
    if val_windows.is_empty() {
        return Ok(f64::NAN);
    }
    let tau = cfg.hyper.tau;
    let mut se_sum = 0.0;
    let mut count = 0usize;
    let indices: Vec<usize> = (0..val_windows.len()).collect();
    for chunk in indices.chunks(cfg.batch) {
        let eps: Vec<f64> = if cfg.variant.blurs(Mode::Eval) {
            let mut all = Vec::with_capacity(chunk.len() * tau);
            for &widx in chunk {
                let mut rng = rng::stream(cfg.seed, &[TAG_EVAL, epoch as u64, widx as u64]);
                all.extend(rng::standard_normals(&mut rng, tau));
            }
            all
        } else {
            Vec::new()
        };
        let windows: Vec<&TimeSeriesWindow> = chunk.iter().map(|&widx| &val_windows[widx]).collect();
        let mut tape = Tape::new();
        let vars = model.enter(&mut tape, false)?;
        let win = enter_batch(&mut tape, &windows)?;
        let out = compound_forward(&mut tape, cfg.variant, Mode::Eval, &vars, &win, &eps)?;
        let pred = tape.value(out.y_d);
        for (within, &widx) in chunk.iter().enumerate() {
            let rows = &pred.data()[within * tau..(within + 1) * tau];
            for (p, t) in rows.iter().zip(val_windows[widx].y_future.data()) {
                se_sum += (p - t) * (p - t);
                count += 1;
            }
        }
    }
    Ok(se_sum / count as f64)
}

/// One evaluated test window: per-step ground truth and model outputs.
#[derive(Clone, Debug)]
pub struct PredRow {
    pub window_start: usize,
    pub step: usize,
    pub y_true: f64,
    pub y_f: f64,
    pub y_b: Option<f64>,
    pub y_d: f64,
}

pub struct PredictOutput {
    pub y_f: Tensor,
    /// First blur draw, when the treatment corrupts at evaluation time.
    pub y_b: Option<Tensor>,
    /// Average of `eval_samples` evaluation passes.
    pub y_d: Tensor,
}

/// Evaluation-mode prediction for one window, averaging `eval_samples`
/// independent corruption draws (a single pass when the treatment does not
/// corrupt at evaluation time). Deterministic per (seed, window index).
pub fn predict(
    cfg: &TrainConfig,
    model: &ModelParams,
    window: &TimeSeriesWindow,
    window_idx: u64,
) -> Result<PredictOutput> {
    let tau = cfg.hyper.tau;
    if !cfg.variant.blurs(Mode::Eval) {
        let mut tape = Tape::new();
        let vars = model.enter(&mut tape, false)?;
        let win = enter_window(&mut tape, window)?;
        let out = compound_forward(&mut tape, cfg.variant, Mode::Eval, &vars, &win, &[])?;
        return Ok(PredictOutput {
            y_f: tape.value(out.y_f).clone(),
            y_b: None,
            y_d: tape.value(out.y_d).clone(),
        });
    }
    // The forecast is sample-independent, so run it once and push all
    // corruption draws through the denoiser as stacked blocks.
    let samples = cfg.eval_samples;
    let mut eps = Vec::with_capacity(samples * tau);
    for s in 0..samples {
        let mut rng = rng::stream(cfg.seed, &[TAG_EVAL, window_idx, s as u64]);
        eps.extend(rng::standard_normals(&mut rng, tau));
    }
    let mut tape = Tape::new();
    let vars = model.enter(&mut tape, false)?;
    let win = enter_window(&mut tape, window)?;
    let gp = vars.gp_vars(cfg.variant)?;
    let aux = vars.aux_vars(cfg.variant)?;
    let y_f = forecaster::forecast(&mut tape, &vars.forecaster, win.x_past, win.cov_future, 1)?;
    let y_f_tiled = tape.tile_rows(y_f, samples)?;
    let sample = if cfg.variant == Variant::DenoiseGp {
        gp_blur::blur_sample(&mut tape, y_f_tiled, gp, &eps, samples)?
    } else {
        gp_blur::isotropic_sample(&mut tape, y_f_tiled, gp.log_noise_var, &eps)?
    };
    let x_tiled = tape.tile_rows(win.x_past, samples)?;
    let cov_tiled = tape.tile_rows(win.cov_future, samples)?;
    let y_d_all = forecaster::denoise(&mut tape, aux, x_tiled, cov_tiled, sample.y_blurred, samples)?;
    let stacked = tape.value(y_d_all);
    let mut y_d = stacked.data()[..tau].to_vec();
    for s in 1..samples {
        for (acc, v) in y_d.iter_mut().zip(&stacked.data()[s * tau..(s + 1) * tau]) {
            *acc += v;
        }
    }
    for v in &mut y_d {
        *v /= samples as f64;
    }
    Ok(PredictOutput {
        y_f: tape.value(y_f).clone(),
        y_b: Some(Tensor::new(vec![tau, 1], tape.value(sample.y_blurred).data()[..tau].to_vec())?),
        y_d: Tensor::new(vec![tau, 1], y_d)?,
    })
}

pub struct EvalResult {
    pub mse: f64,
    pub mae: f64,
    pub rows: Vec<PredRow>,
}

/// Score a window set in normalized space and collect per-step prediction
/// rows for the dump files.
pub fn evaluate(cfg: &TrainConfig, model: &ModelParams, windows: &[TimeSeriesWindow]) -> Result<EvalResult> {
    if windows.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let mut rows = Vec::new();
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut count = 0usize;
    for (widx, window) in windows.iter().enumerate() {
        let out = predict(cfg, model, window, widx as u64)?;
        for step in 0..cfg.hyper.tau {
            let y_true = window.y_future.at2(step, 0);
            let y_d = out.y_d.at2(step, 0);
            se += (y_d - y_true) * (y_d - y_true);
            ae += (y_d - y_true).abs();
            count += 1;
            rows.push(PredRow {
                window_start: window.start,
                step,
                y_true,
                y_f: out.y_f.at2(step, 0),
                y_b: out.y_b.as_ref().map(|b| b.at2(step, 0)),
                y_d,
            });
        }
    }
    Ok(EvalResult { mse: se / count as f64, mae: ae / count as f64, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, split_train_val_test, synth_series, SeriesKind, WindowConfig};

    fn toy_cfg(variant: Variant) -> TrainConfig {
        TrainConfig {
            variant,
            hyper: ForecasterHyper { d_model: 8, n_heads: 2, n_layers: 1, kappa: 8, tau: 4 },
            m_inducing: 4,
            lambda: 0.001,
            batch: 8,
            epochs: 2,
            warmup: 100,
            seed: 7,
            eval_samples: 1,
            detach_blur: false,
            blur_per_epoch: false,
        }
    }

    fn toy_windows() -> (Vec<TimeSeriesWindow>, Vec<TimeSeriesWindow>) {
        let series = synth_series(SeriesKind::SineMix, 72, 3, 0.05);
        let cfg = WindowConfig::new(8, 4, 1).unwrap();
        let windows = make_windows(&series, &cfg).unwrap();
        let (train, val, _) = split_train_val_test(windows).unwrap();
        (train, val)
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("GD".parse::<Variant>().is_err());
    }

    #[test]
    fn lr_schedule_crossover_and_decay() {
        let lr_peak = lr_schedule(100, 100, 16).unwrap();
        assert!((lr_peak - 16.0_f64.powf(-0.5) * 100.0_f64.powf(-0.5)).abs() < 1e-15);
        let lr_half = lr_schedule(50, 100, 16).unwrap();
        assert!((lr_half - 0.5 * lr_peak).abs() < 1e-15);
        let mut prev = lr_peak;
        for step in 101..400 {
            let lr = lr_schedule(step, 100, 16).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
        assert!(lr_schedule(0, 100, 16).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let snapshot = p.clone();
        let mut adam = AdamState::new(&[vec![3]], 100, 16);
        adam.step(&mut [&mut p], &[Tensor::zeros(&[3])]).unwrap();
        assert_eq!(p.data(), snapshot.data());
    }

    #[test]
    fn adam_constant_gradient_moves_at_lr() {
        let mut p = Tensor::scalar(0.0);
        let mut adam = AdamState::new(&[vec![1]], 100, 16);
        let g = Tensor::scalar(3.0);
        for step in 1..=20 {
            let before = p.item();
            adam.step(&mut [&mut p], &[g.clone()]).unwrap();
            let lr = lr_schedule(step, 100, 16).unwrap();
            let delta = before - p.item();
            assert!((delta / lr - 1.0).abs() < 1e-6, "step {}: delta {} lr {}", step, delta, lr);
        }
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        let mut x = Tensor::scalar(1.0);
        let mut adam = AdamState::new(&[vec![1]], 100, 16);
        let mut tail_max = 0.0_f64;
        for step in 1..=2000 {
            let g = Tensor::scalar(2.0 * x.item());
            adam.step(&mut [&mut x], &[g]).unwrap();
            if step > 1900 {
                tail_max = tail_max.max(x.item().abs());
            }
        }
        assert!(x.item().abs() < 1e-3, "final {}", x.item());
        assert!(tail_max < 1e-2, "tail max {}", tail_max);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = Tensor::scalar(1.0);
        let mut adam = AdamState::new(&[vec![1]], 100, 16);
        let out = adam.step(&mut [&mut p], &[Tensor::scalar(f64::NAN)]).unwrap();
        assert_eq!(out, StepOutcome::RejectedNonFinite);
        assert_eq!(p.item(), 1.0);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn gradient_clip_bounds_global_norm() {
        let grads = vec![Tensor::new(vec![2], vec![30.0, 40.0]).unwrap()];
        let norm = global_grad_norm(&grads);
        assert!((norm - 50.0).abs() < 1e-12);
        // Clipping inside the step: a huge gradient must move the parameter
        // by no more than lr (Adam normalizes per-element to at most lr).
        let mut p = Tensor::scalar(0.0);
        let mut adam = AdamState::new(&[vec![1]], 100, 16);
        adam.step(&mut [&mut p], &[Tensor::scalar(1e9)]).unwrap();
        let lr = lr_schedule(1, 100, 16).unwrap();
        assert!(p.item().abs() <= lr * 1.0001);
    }

    #[test]
    fn forecast_only_output_is_forecast() {
        let cfg = toy_cfg(Variant::ForecastOnly);
        let model = ModelParams::init(cfg.variant, &cfg.hyper, cfg.m_inducing, 5).unwrap();
        let (train, _) = toy_windows();
        let mut tape = Tape::new();
        let vars = model.enter(&mut tape, false).unwrap();
        let win = enter_window(&mut tape, &train[0]).unwrap();
        let out = compound_forward(&mut tape, cfg.variant, Mode::Train, &vars, &win, &[]).unwrap();
        assert_eq!(tape.value(out.y_d).data(), tape.value(out.y_f).data());
        assert!(out.y_b.is_none());
    }

    #[test]
    fn dg_with_zero_eps_matches_dwc_loss_bitwise() {
        let cfg = toy_cfg(Variant::DenoiseGp);
        let dg = ModelParams::init(Variant::DenoiseGp, &cfg.hyper, cfg.m_inducing, 5).unwrap();
        let dwc = ModelParams {
            variant: Variant::DenoiseWithoutCorruption,
            forecaster: dg.forecaster.clone(),
            gp: None,
            aux: dg.aux.clone(),
        };
        let (train, _) = toy_windows();
        let window = &train[3];

        let dg_loss = {
            let mut tape = Tape::new();
            let vars = dg.enter(&mut tape, false).unwrap();
            let win = enter_window(&mut tape, window).unwrap();
            let out =
                compound_forward(&mut tape, Variant::DenoiseGp, Mode::Train, &vars, &win, &[0.0; 4])
                    .unwrap();
            let loss = compound_loss(&mut tape, Variant::DenoiseGp, &out, &win, None, 0.0).unwrap();
            tape.value(loss).item()
        };
        let dwc_loss = {
            let mut tape = Tape::new();
            let vars = dwc.enter(&mut tape, false).unwrap();
            let win = enter_window(&mut tape, window).unwrap();
            let out = compound_forward(
                &mut tape,
                Variant::DenoiseWithoutCorruption,
                Mode::Train,
                &vars,
                &win,
                &[],
            )
            .unwrap();
            let loss =
                compound_loss(&mut tape, Variant::DenoiseWithoutCorruption, &out, &win, None, 0.0)
                    .unwrap();
            tape.value(loss).item()
        };
        assert_eq!(dg_loss.to_bits(), dwc_loss.to_bits());
    }

    #[test]
    fn loss_decomposition_is_exact() {
        let cfg = toy_cfg(Variant::DenoiseGp);
        let model = ModelParams::init(cfg.variant, &cfg.hyper, cfg.m_inducing, 9).unwrap();
        let (train, _) = toy_windows();
        let win_data = &train[0];
        let eps = [0.7, -0.3, 1.1, 0.2];
        for lambda in [0.001, 0.5, 3.0] {
            let mut tape = Tape::new();
            let vars = model.enter(&mut tape, false).unwrap();
            let win = enter_window(&mut tape, win_data).unwrap();
            let out =
                compound_forward(&mut tape, cfg.variant, Mode::Train, &vars, &win, &eps).unwrap();
            let bound =
                regularizer_term(&mut tape, cfg.variant, &vars, &win, &out, false).unwrap();
            let bound_value = tape.value(bound.unwrap()).item();
            let full =
                compound_loss(&mut tape, cfg.variant, &out, &win, bound, lambda).unwrap();
            let mse_only = compound_loss(&mut tape, cfg.variant, &out, &win, bound, 0.0).unwrap();
            let lhs = tape.value(full).item();
            let rhs = tape.value(mse_only).item() + lambda * (-bound_value);
            assert_eq!(lhs.to_bits(), rhs.to_bits(), "lambda {}", lambda);
        }
    }

    #[test]
    fn batched_windows_match_separate_passes() {
        let cfg = toy_cfg(Variant::DenoiseGp);
        let model = ModelParams::init(cfg.variant, &cfg.hyper, cfg.m_inducing, 11).unwrap();
        let (train, _) = toy_windows();
        let windows: Vec<&TimeSeriesWindow> = train.iter().take(3).collect();
        let tau = cfg.hyper.tau;
        let eps: Vec<f64> =
            (0..windows.len() * tau).map(|i| ((i * 37 + 11) % 17) as f64 / 8.5 - 1.0).collect();

        let mut tape = Tape::new();
        let vars = model.enter(&mut tape, true).unwrap();
        let win = enter_batch(&mut tape, &windows).unwrap();
        let out = compound_forward(&mut tape, cfg.variant, Mode::Train, &vars, &win, &eps).unwrap();
        let bound = regularizer_term(&mut tape, cfg.variant, &vars, &win, &out, false).unwrap();
        let loss = compound_loss(&mut tape, cfg.variant, &out, &win, bound, cfg.lambda).unwrap();
        let batch_loss = tape.value(loss).item();
        let grads = tape.backward(loss).unwrap();
        let batch_grads: Vec<Tensor> =
            vars.all_vars().iter().map(|v| grads.wrt(*v, &tape)).collect();
        let batch_yf = tape.value(out.y_f).data().to_vec();
        let batch_yb = tape.value(out.y_b.unwrap()).data().to_vec();
        let batch_yd = tape.value(out.y_d).data().to_vec();

        let mut loss_sum = 0.0;
        let mut grad_sums: Vec<Tensor> = Vec::new();
        for (i, w) in windows.iter().enumerate() {
            let rows = i * tau..(i + 1) * tau;
            let mut t = Tape::new();
            let v1 = model.enter(&mut t, true).unwrap();
            let w1 = enter_window(&mut t, w).unwrap();
            let o1 =
                compound_forward(&mut t, cfg.variant, Mode::Train, &v1, &w1, &eps[rows.clone()])
                    .unwrap();
            // the batch is block-diagonal, so each window's rows are untouched
            // by its neighbours
            assert_eq!(t.value(o1.y_f).data(), &batch_yf[rows.clone()]);
            assert_eq!(t.value(o1.y_b.unwrap()).data(), &batch_yb[rows.clone()]);
            assert_eq!(t.value(o1.y_d).data(), &batch_yd[rows]);
            let b1 = regularizer_term(&mut t, cfg.variant, &v1, &w1, &o1, false).unwrap();
            let l1 = compound_loss(&mut t, cfg.variant, &o1, &w1, b1, cfg.lambda).unwrap();
            loss_sum += t.value(l1).item();
            let g1 = t.backward(l1).unwrap();
            for (j, var) in v1.all_vars().iter().enumerate() {
                let g = g1.wrt(*var, &t);
                if j == grad_sums.len() {
                    grad_sums.push(g);
                } else {
                    let summed = Tensor::new(
                        grad_sums[j].shape().to_vec(),
                        grad_sums[j].data().iter().zip(g.data()).map(|(a, b)| a + b).collect(),
                    )
                    .unwrap();
                    grad_sums[j] = summed;
                }
            }
        }

        let mean_loss = loss_sum / windows.len() as f64;
        assert!(
            (batch_loss - mean_loss).abs() <= 1e-12 * mean_loss.abs().max(1.0),
            "batch loss {} vs per-window mean {}",
            batch_loss,
            mean_loss
        );
        assert_eq!(batch_grads.len(), grad_sums.len());
        for (bg, sum) in batch_grads.iter().zip(&grad_sums) {
            assert_eq!(bg.shape(), sum.shape());
            for (a, s) in bg.data().iter().zip(sum.data()) {
                let mean = s / windows.len() as f64;
                assert!(
                    (a - mean).abs() <= 1e-9 + 1e-8 * mean.abs(),
                    "batch grad {} vs per-window mean {}",
                    a,
                    mean
                );
            }
        }
    }

    #[test]
    fn dt_eval_ignores_noise_dg_eval_does_not() {
        let cfg = toy_cfg(Variant::DenoiseTrainOnly);
        let model = ModelParams::init(cfg.variant, &cfg.hyper, cfg.m_inducing, 5).unwrap();
        let (train, _) = toy_windows();
        let run = |variant: Variant, mode: Mode, eps: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let vars = model.enter(&mut tape, false).unwrap();
            let win = enter_window(&mut tape, &train[0]).unwrap();
            let out = compound_forward(&mut tape, variant, mode, &vars, &win, eps).unwrap();
            tape.value(out.y_d).data().to_vec()
        };
        let a = run(Variant::DenoiseTrainOnly, Mode::Eval, &[1.0, 2.0, 3.0, 4.0]);
        let b = run(Variant::DenoiseTrainOnly, Mode::Eval, &[-4.0, 0.0, 2.0, 9.0]);
        assert_eq!(a, b);
        let c = run(Variant::DenoiseTrainOnly, Mode::Train, &[1.0, 2.0, 3.0, 4.0]);
        let d = run(Variant::DenoiseTrainOnly, Mode::Train, &[-4.0, 0.0, 2.0, 9.0]);
        assert_ne!(c, d);
    }

    #[test]
    fn residual_boost_starts_at_forecast_and_doubles_mse() {
        let cfg = toy_cfg(Variant::ResidualBoost);
        let model = ModelParams::init(cfg.variant, &cfg.hyper, cfg.m_inducing, 5).unwrap();
        let (train, _) = toy_windows();
        let mut tape = Tape::new();
        let vars = model.enter(&mut tape, false).unwrap();
        let win = enter_window(&mut tape, &train[0]).unwrap();
        let out = compound_forward(&mut tape, cfg.variant, Mode::Train, &vars, &win, &[]).unwrap();
        // zero-initialized residual head: boosted output equals the forecast
        assert_eq!(tape.value(out.y_d).data(), tape.value(out.y_f).data());
        let loss = compound_loss(&mut tape, cfg.variant, &out, &win, None, 0.0).unwrap();
        let mse = {
            let d = tape.sub(out.y_f, win.y_true).unwrap();
            let sq = tape.square(d).unwrap();
            let m = tape.mean(sq).unwrap();
            tape.value(m).item()
        };
        assert!((tape.value(loss).item() - 2.0 * mse).abs() < 1e-15);
    }

    #[test]
    fn missing_parameter_sets_are_reported() {
        let cfg = toy_cfg(Variant::DenoiseGp);
        let broken = ModelParams {
            variant: Variant::DenoiseGp,
            forecaster: ModelParams::init(Variant::ForecastOnly, &cfg.hyper, 4, 1)
                .unwrap()
                .forecaster,
            gp: None,
            aux: None,
        };
        let (train, _) = toy_windows();
        let mut tape = Tape::new();
        let vars = broken.enter(&mut tape, false).unwrap();
        let win = enter_window(&mut tape, &train[0]).unwrap();
        let err =
            compound_forward(&mut tape, Variant::DenoiseGp, Mode::Train, &vars, &win, &[0.0; 4]);
        assert!(err.is_err());
    }

    #[test]
    fn training_histories_are_bit_identical_across_reruns() {
        let (train_w, val_w) = toy_windows();
        for variant in [Variant::ForecastOnly, Variant::DenoiseGp] {
            let cfg = toy_cfg(variant);
            let a = train(&cfg, &train_w, &val_w).unwrap();
            let b = train(&cfg, &train_w, &val_w).unwrap();
            assert_eq!(a.history.len(), cfg.epochs);
            for (x, y) in a.history.iter().zip(&b.history) {
                assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits(), "{}", variant);
                assert_eq!(x.val_mse.to_bits(), y.val_mse.to_bits(), "{}", variant);
            }
            assert_eq!(a.incidents, 0);
        }
    }

    #[test]
    fn dwc_history_is_independent_of_lambda() {
        let (train_w, val_w) = toy_windows();
        let mut cfg = toy_cfg(Variant::DenoiseWithoutCorruption);
        let a = train(&cfg, &train_w, &val_w).unwrap();
        cfg.lambda = 0.0;
        let b = train(&cfg, &train_w, &val_w).unwrap();
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        }
    }

    #[test]
    fn predictions_are_deterministic_and_tau_shaped() {
        let (train_w, val_w) = toy_windows();
        let cfg = toy_cfg(Variant::DenoiseGp);
        let outcome = train(&cfg, &train_w, &val_w).unwrap();
        let p1 = predict(&cfg, &outcome.model, &val_w[0], 0).unwrap();
        let p2 = predict(&cfg, &outcome.model, &val_w[0], 0).unwrap();
        assert_eq!(p1.y_d.data(), p2.y_d.data());
        assert_eq!(p1.y_d.shape(), &[4, 1]);
        assert!(p1.y_b.is_some());
        let p3 = predict(&cfg, &outcome.model, &val_w[0], 1).unwrap();
        assert_ne!(p1.y_d.data(), p3.y_d.data());
    }

    #[test]
    fn dt_prediction_ignores_eval_samples() {
        let (train_w, val_w) = toy_windows();
        let mut cfg = toy_cfg(Variant::DenoiseTrainOnly);
        cfg.epochs = 1;
        let outcome = train(&cfg, &train_w, &val_w).unwrap();
        let one = predict(&cfg, &outcome.model, &val_w[0], 0).unwrap();
        cfg.eval_samples = 9;
        let many = predict(&cfg, &outcome.model, &val_w[0], 0).unwrap();
        assert_eq!(one.y_d.data(), many.y_d.data());
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let mut cfg = toy_cfg(Variant::DenoiseGp);
        cfg.m_inducing = 5; // exceeds tau = 4
        assert!(cfg.validate().is_err());
        let mut cfg = toy_cfg(Variant::ForecastOnly);
        cfg.lambda = -0.5;
        assert!(cfg.validate().is_err());
        let mut cfg = toy_cfg(Variant::ForecastOnly);
        cfg.batch = 0;
        assert!(cfg.validate().is_err());
    }
}
