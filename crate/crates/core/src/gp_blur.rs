//! GP-based blur model and its sparse variational evidence bound.
//!
//! The blur corrupts a forecast with a temporally correlated Gaussian draw:
//! `Y_B = Y_F + L eps` where `L` is the Cholesky factor of `K + sigma^2 I`
//! and `K` is an RBF kernel over normalized time indices. Because the draw
//! is reparameterized through `L`, gradients flow into the kernel
//! hyperparameters and the forecast alike.
//!
//! The same hyperparameters are trained by a sparse variational bound on the
//! log marginal likelihood of the residual `r = y - Y_F` (inducing points
//! with a free-form Gaussian over their function values). The bound is
//! returned as a value to maximize; [`exact_log_marginal`] is the dense
//! counterpart used by tests to check it from the other side.

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Diagonal jitter added to the inducing-point Gram matrix before
/// factorization.
pub const KMM_JITTER: f64 = 1e-8;

/// Trainable blur parameters: kernel hyperparameters in log space (so the
/// constrained quantities stay positive), plus inducing locations and the
/// variational distribution over inducing function values.
///
/// `variational_chol_raw` stores the covariance factor indirectly: the lower
/// factor is `strict_lower(W) + diag(exp(diag(W)))`, keeping its diagonal
/// positive for any real `W`. Entries above the diagonal are unused.
#[derive(Clone, Debug)]
pub struct GpBlurParams {
    pub log_lengthscale: Tensor,
    pub log_signal_var: Tensor,
    pub log_noise_var: Tensor,
    pub inducing_inputs: Tensor,
    pub variational_mean: Tensor,
    pub variational_chol_raw: Tensor,
}

pub const DEFAULT_LENGTHSCALE: f64 = 0.25;
pub const DEFAULT_SIGNAL_VAR: f64 = 0.1;
pub const DEFAULT_NOISE_VAR: f64 = 0.01;

impl GpBlurParams {
    /// Defaults with `m` inducing points on a uniform grid over [0, 1].
    pub fn init(m: usize) -> Self {
        GpBlurParams {
            log_lengthscale: Tensor::scalar(DEFAULT_LENGTHSCALE.ln()),
            log_signal_var: Tensor::scalar(DEFAULT_SIGNAL_VAR.ln()),
            log_noise_var: Tensor::scalar(DEFAULT_NOISE_VAR.ln()),
            inducing_inputs: time_grid(m),
            variational_mean: Tensor::zeros(&[m]),
            variational_chol_raw: Tensor::zeros(&[m, m]),
        }
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing_inputs.numel()
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("gp.log_lengthscale".into(), &self.log_lengthscale),
            ("gp.log_signal_var".into(), &self.log_signal_var),
            ("gp.log_noise_var".into(), &self.log_noise_var),
            ("gp.inducing_inputs".into(), &self.inducing_inputs),
            ("gp.variational_mean".into(), &self.variational_mean),
            ("gp.variational_chol_raw".into(), &self.variational_chol_raw),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("gp.log_lengthscale".into(), &mut self.log_lengthscale),
            ("gp.log_signal_var".into(), &mut self.log_signal_var),
            ("gp.log_noise_var".into(), &mut self.log_noise_var),
            ("gp.inducing_inputs".into(), &mut self.inducing_inputs),
            ("gp.variational_mean".into(), &mut self.variational_mean),
            ("gp.variational_chol_raw".into(), &mut self.variational_chol_raw),
        ]
    }

    /// Register the parameters on a tape, tracked or frozen.
    pub fn enter(&self, tape: &mut Tape, trainable: bool) -> Result<GpVars> {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        Ok(GpVars {
            log_lengthscale: put(&self.log_lengthscale)?,
            log_signal_var: put(&self.log_signal_var)?,
            log_noise_var: put(&self.log_noise_var)?,
            inducing_inputs: put(&self.inducing_inputs)?,
            variational_mean: put(&self.variational_mean)?,
            variational_chol_raw: put(&self.variational_chol_raw)?,
        })
    }
}

/// Tape handles for one forward pass over [`GpBlurParams`].
#[derive(Clone, Copy, Debug)]
pub struct GpVars {
    pub log_lengthscale: Var,
    pub log_signal_var: Var,
    pub log_noise_var: Var,
    pub inducing_inputs: Var,
    pub variational_mean: Var,
    pub variational_chol_raw: Var,
}

impl GpVars {
    pub fn all(&self) -> [Var; 6] {
        [
            self.log_lengthscale,
            self.log_signal_var,
            self.log_noise_var,
            self.inducing_inputs,
            self.variational_mean,
            self.variational_chol_raw,
        ]
    }
}

/// Normalized time locations `i/(n-1)` on [0, 1] (`[0]` for n = 1).
pub fn time_grid(n: usize) -> Tensor {
    if n == 1 {
        return Tensor::zeros(&[1]);
    }
    Tensor::from_fn(&[n], |i| i as f64 / (n - 1) as f64)
}

/// Squared-exponential kernel matrix `K[i,j] = s^2 exp(-(a_i-b_j)^2/(2 l^2))`
/// between two location vectors, differentiable in locations and
/// hyperparameters.
pub fn rbf_kernel(tape: &mut Tape, t_a: Var, t_b: Var, log_lengthscale: Var, log_signal_var: Var) -> Result<Var> {
    let n = tape.value(t_a).numel();
    let m = tape.value(t_b).numel();
    let a_col = tape.reshape(t_a, &[n, 1])?;
    let b_row = tape.reshape(t_b, &[1, m])?;
    let diff = tape.sub(a_col, b_row)?;
    let d2 = tape.square(diff)?;
    let inv_two_l2 = tape.scale(log_lengthscale, -2.0)?;
    let inv_two_l2 = tape.exp(inv_two_l2)?;
    let scaled = tape.mul(d2, inv_two_l2)?;
    let scaled = tape.scale(scaled, -0.5)?;
    let gauss = tape.exp(scaled)?;
    let s2 = tape.exp(log_signal_var)?;
    tape.mul(gauss, s2)
}

/// One blur draw recorded on a tape.
pub struct BlurSample {
    pub y_blurred: Var,
    pub epsilon: Vec<f64>,
}

/// Draw `eps` for a horizon of length `tau`.
pub fn draw_eps(rng: &mut rand_chacha::ChaCha8Rng, tau: usize) -> Vec<f64> {
    rng::standard_normals(rng, tau)
}

/// Correlated blur: `Y_B = Y_F + chol(K + sigma^2 I) eps`, applied
/// independently to each of `n_blocks` stacked horizons (`eps` holds the
/// draws back to back). The factor is shared, so the whole batch costs one
/// Cholesky and one matmul. With `eps = 0` the output equals the forecast
/// bit-for-bit.
pub fn blur_sample(
    tape: &mut Tape,
    y_f: Var,
    gp: &GpVars,
    eps: &[f64],
    n_blocks: usize,
) -> Result<BlurSample> {
    let rows = tape.value(y_f).rows();
    if n_blocks == 0 || rows % n_blocks != 0 || eps.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "blur_sample",
            detail: format!("eps length {} vs {} rows in {} blocks", eps.len(), rows, n_blocks),
        });
    }
    let tau = rows / n_blocks;
    let t = tape.constant(time_grid(tau))?;
    let k = rbf_kernel(tape, t, t, gp.log_lengthscale, gp.log_signal_var)?;
    let eye = tape.constant(Tensor::eye(tau))?;
    let sigma2 = tape.exp(gp.log_noise_var)?;
    let noise_diag = tape.mul(eye, sigma2)?;
    let cov = tape.add(k, noise_diag)?;
    let l = tape.cholesky(cov)?;
    let e = tape.constant(Tensor::from_fn(&[tau, n_blocks], |i| {
        let (step, block) = (i / n_blocks, i % n_blocks);
        eps[block * tau + step]
    }))?;
    let smooth_cols = tape.matmul(l, e)?;
    let smooth_rows = tape.transpose(smooth_cols)?;
    let smooth = tape.reshape(smooth_rows, &[rows, 1])?;
    let y_blurred = tape.add(y_f, smooth)?;
    Ok(BlurSample { y_blurred, epsilon: eps.to_vec() })
}

/// Uncorrelated blur: `Y_B = Y_F + sigma eps` with a single learnable
/// variance (entering through its log). Elementwise, so stacked horizons
/// need no block bookkeeping.
pub fn isotropic_sample(tape: &mut Tape, y_f: Var, log_noise_var: Var, eps: &[f64]) -> Result<BlurSample> {
    let rows = tape.value(y_f).rows();
    if eps.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "isotropic_sample",
            detail: format!("eps length {} vs {} stacked rows", eps.len(), rows),
        });
    }
    let e = tape.constant(Tensor::new(vec![rows, 1], eps.to_vec())?)?;
    let log_sigma = tape.scale(log_noise_var, 0.5)?;
    let sigma = tape.exp(log_sigma)?;
    let scaled = tape.mul(e, sigma)?;
    let y_blurred = tape.add(y_f, scaled)?;
    Ok(BlurSample { y_blurred, epsilon: eps.to_vec() })
}

/// Build the lower-triangular variational factor from its raw parameter:
/// strict lower triangle copied through, diagonal mapped through `exp`.
fn variational_chol(tape: &mut Tape, w_raw: Var) -> Result<Var> {
    let m = tape.value(w_raw).rows();
    let mask = Tensor::from_fn(&[m, m], |i| if i / m > i % m { 1.0 } else { 0.0 });
    let mask = tape.constant(mask)?;
    let strict = tape.mul(w_raw, mask)?;
    let d = tape.diag_part(w_raw)?;
    let expd = tape.exp(d)?;
    let diag = tape.diag_embed(expd)?;
    tape.add(strict, diag)
}

/// Sparse variational lower bound on the log marginal likelihood of the
/// residual `r = y_true - y_f` under a zero-mean GP with Gaussian noise.
/// Returned as a value to be maximized; the training loss negates it.
pub fn svgp_elbo(tape: &mut Tape, y_true: Var, y_f: Var, gp: &GpVars) -> Result<Var> {
    let tau = tape.value(y_f).rows();
    let m = tape.value(gp.inducing_inputs).numel();
    let n = tau as f64;

    let r = tape.sub(y_true, y_f)?;
    let t = tape.constant(time_grid(tau))?;

    // Inducing Gram matrix with jitter, and the cross-covariance to the data
    // locations.
    let k_mm = rbf_kernel(tape, gp.inducing_inputs, gp.inducing_inputs, gp.log_lengthscale, gp.log_signal_var)?;
    let jitter = tape.constant(Tensor::from_fn(&[m, m], |i| {
        if i / m == i % m {
            KMM_JITTER
        } else {
            0.0
        }
    }))?;
    let k_mm = tape.add(k_mm, jitter)?;
    let k_mn = rbf_kernel(tape, gp.inducing_inputs, t, gp.log_lengthscale, gp.log_signal_var)?;
    let l_m = tape.cholesky(k_mm)?;

    // V = L_M^{-1} K_MN and w = L_M^{-1} m carry everything the bound needs
    // from the prior side.
    let v = tape.triangular_solve(l_m, k_mn)?;
    let mean_col = tape.reshape(gp.variational_mean, &[m, 1])?;
    let w = tape.triangular_solve(l_m, mean_col)?;

    // Predictive marginals at the data: mu = V^T w;
    // sum of variances = n s^2 - |V|_F^2 + |G^T V|_F^2 with G = L_M^{-1} L_S.
    let l_s = variational_chol(tape, gp.variational_chol_raw)?;
    let g = tape.triangular_solve(l_m, l_s)?;
    let vt = tape.transpose(v)?;
    let mu = tape.matmul(vt, w)?;
    let gt = tape.transpose(g)?;
    let b = tape.matmul(gt, v)?;

    let s2 = tape.exp(gp.log_signal_var)?;
    let ns2 = tape.scale(s2, n)?;
    let v_sq = tape.square(v)?;
    let v_norm = tape.sum(v_sq)?;
    let b_sq = tape.square(b)?;
    let b_norm = tape.sum(b_sq)?;
    let var_sum = tape.sub(ns2, v_norm)?;
    let var_sum = tape.add(var_sum, b_norm)?;

    // Expected Gaussian log likelihood:
    // -n/2 log(2 pi sigma^2) - (|r - mu|^2 + sum var) / (2 sigma^2)
    let diff = tape.sub(r, mu)?;
    let diff_sq = tape.square(diff)?;
    let sq_err = tape.sum(diff_sq)?;
    let quad = tape.add(sq_err, var_sum)?;
    let inv_sigma2 = tape.neg(gp.log_noise_var)?;
    let inv_sigma2 = tape.exp(inv_sigma2)?;
    let quad = tape.mul(quad, inv_sigma2)?;
    let quad = tape.scale(quad, -0.5)?;
    let log_two_pi = tape.constant(Tensor::scalar((2.0 * std::f64::consts::PI).ln()))?;
    let log_norm = tape.add(gp.log_noise_var, log_two_pi)?;
    let log_norm = tape.scale(log_norm, -0.5 * n)?;
    let ell = tape.add(log_norm, quad)?;

    // KL(q(u) || p(u)) = 1/2 (|G|_F^2 + |w|^2 - M + log|K_MM| - log|S|)
    let g_sq = tape.square(g)?;
    let g_norm = tape.sum(g_sq)?;
    let w_sq = tape.square(w)?;
    let w_norm = tape.sum(w_sq)?;
    let diag_lm = tape.diag_part(l_m)?;
    let log_diag_lm = tape.ln(diag_lm)?;
    let half_logdet_kmm = tape.sum(log_diag_lm)?;
    let diag_w_raw = tape.diag_part(gp.variational_chol_raw)?;
    let half_logdet_s = tape.sum(diag_w_raw)?;
    let logdet_gap = tape.sub(half_logdet_kmm, half_logdet_s)?;
    let logdet_gap = tape.scale(logdet_gap, 2.0)?;
    let kl = tape.add(g_norm, w_norm)?;
    let kl = tape.add(kl, logdet_gap)?;
    let m_const = tape.constant(Tensor::scalar(m as f64))?;
    let kl = tape.sub(kl, m_const)?;
    let kl = tape.scale(kl, 0.5)?;

    tape.sub(ell, kl)
}

/// Exact isotropic Gaussian log likelihood of the residual, the degenerate
/// counterpart of [`svgp_elbo`] used by the isotropic-noise treatment to
/// train its variance.
pub fn isotropic_loglik(tape: &mut Tape, y_true: Var, y_f: Var, log_noise_var: Var) -> Result<Var> {
    let n = tape.value(y_f).rows() as f64;
    let r = tape.sub(y_true, y_f)?;
    let r_sq = tape.square(r)?;
    let sq_err = tape.sum(r_sq)?;
    let inv_sigma2 = tape.neg(log_noise_var)?;
    let inv_sigma2 = tape.exp(inv_sigma2)?;
    let quad = tape.mul(sq_err, inv_sigma2)?;
    let quad = tape.scale(quad, -0.5)?;
    let log_two_pi = tape.constant(Tensor::scalar((2.0 * std::f64::consts::PI).ln()))?;
    let log_norm = tape.add(log_noise_var, log_two_pi)?;
    let log_norm = tape.scale(log_norm, -0.5 * n)?;
    tape.add(log_norm, quad)
}

/// Dense log marginal likelihood `log N(r | 0, K + sigma^2 I)` computed with
/// plain scalar arithmetic and a local factorization, independent of the
/// tape. Test oracle for [`svgp_elbo`]; quadratic memory, so horizons are
/// capped.
pub fn exact_log_marginal(
    y_true: &Tensor,
    y_f: &Tensor,
    lengthscale: f64,
    signal_var: f64,
    noise_var: f64,
) -> Result<f64> {
    let tau = y_f.numel();
    if y_true.numel() != tau {
        return Err(Error::ShapeMismatch {
            op: "exact_log_marginal",
            detail: format!("{:?} vs {:?}", y_true.shape(), y_f.shape()),
        });
    }
    if tau > 64 {
        return Err(Error::Config(format!("exact_log_marginal supports up to 64 steps, got {}", tau)));
    }
    let grid = time_grid(tau);
    let t = grid.data();
    let mut c = vec![0.0; tau * tau];
    for i in 0..tau {
        for j in 0..tau {
            let d = t[i] - t[j];
            c[i * tau + j] = signal_var * (-d * d / (2.0 * lengthscale * lengthscale)).exp();
        }
        c[i * tau + i] += noise_var;
    }
    // Outer-product Cholesky, kept local so this oracle does not share the
    // factorization code under test.
    let mut l = c;
    for j in 0..tau {
        for k in 0..j {
            let ljk = l[j * tau + k];
            for i in j..tau {
                l[i * tau + j] -= l[i * tau + k] * ljk;
            }
        }
        let d = l[j * tau + j];
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let sq = d.sqrt();
        for i in j..tau {
            l[i * tau + j] /= sq;
        }
    }
    let mut alpha: Vec<f64> = y_true
        .data()
        .iter()
        .zip(y_f.data())
        .map(|(a, b)| a - b)
        .collect();
    let mut half_logdet = 0.0;
    for i in 0..tau {
        for k in 0..i {
            alpha[i] -= l[i * tau + k] * alpha[k];
        }
        alpha[i] /= l[i * tau + i];
        half_logdet += l[i * tau + i].ln();
    }
    let quad: f64 = alpha.iter().map(|a| a * a).sum();
    Ok(-0.5 * quad - half_logdet - 0.5 * tau as f64 * (2.0 * std::f64::consts::PI).ln())
}
