//! Attention encoder-decoder forecaster.
//!
//! One architecture serves three roles: the forecaster (maps a lookback
//! window to the horizon), the denoiser (same network with its own weights,
//! consuming a corrupted horizon and emitting a residual correction on top
//! of it), and the residual predictor of the boosted variant.
//!
//! Layout: the encoder embeds each lookback step (covariates + target) and
//! runs pre-norm self-attention blocks. The decoder starts from learned
//! per-horizon queries plus an embedding of the future covariates (and the
//! corrupted targets, when given one), self-attends, cross-attends into the
//! encoder memory, and projects to one output per horizon step. Calendar
//! covariates double as positional information, so no separate positional
//! encoding is added.

use rand_chacha::rand_core::RngCore;
use rand_chacha::ChaCha8Rng;

use crate::data::{D_X, D_Y};
use crate::error::{Error, Result};
use crate::rng::{self, TAG_PARAM_INIT};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForecasterHyper {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub kappa: usize,
    pub tau: usize,
}

impl ForecasterHyper {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return Err(Error::Config("d_model, n_heads, n_layers must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model / self.n_heads < 1 || self.kappa == 0 || self.tau == 0 {
            return Err(Error::Config("degenerate forecaster dimensions".into()));
        }
        Ok(())
    }

    fn d_ff(&self) -> usize {
        2 * self.d_model
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln_attn: LayerNormParams,
    pub attn: AttentionWeights,
    pub ln_ff: LayerNormParams,
    pub ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln_self: LayerNormParams,
    pub self_attn: AttentionWeights,
    pub ln_cross: LayerNormParams,
    pub cross_attn: AttentionWeights,
    pub ln_ff: LayerNormParams,
    pub ff: FeedForward,
}

/// Full weight set for one network instance.
#[derive(Clone, Debug)]
pub struct ForecasterParams {
    pub hyper: ForecasterHyper,
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub enc_layers: Vec<EncoderLayer>,
    pub enc_final: LayerNormParams,
    pub dec_query: Tensor,
    pub dec_embed_w: Tensor,
    pub dec_embed_b: Tensor,
    pub dec_layers: Vec<DecoderLayer>,
    pub dec_final: LayerNormParams,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn uniform_tensor(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            (2.0 * u - 1.0) * bound
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("uniform tensor shape")
}

impl LayerNormParams {
    fn init(d: usize) -> Self {
        LayerNormParams { gain: Tensor::ones(&[d]), bias: Tensor::zeros(&[d]) }
    }
}

impl AttentionWeights {
    fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionWeights {
            wq: uniform_tensor(&[d, d], d, rng),
            bq: Tensor::zeros(&[d]),
            wk: uniform_tensor(&[d, d], d, rng),
            bk: Tensor::zeros(&[d]),
            wv: uniform_tensor(&[d, d], d, rng),
            bv: Tensor::zeros(&[d]),
            wo: uniform_tensor(&[d, d], d, rng),
            bo: Tensor::zeros(&[d]),
        }
    }
}

impl FeedForward {
    fn init(d: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            w1: uniform_tensor(&[d, d_ff], d, rng),
            b1: Tensor::zeros(&[d_ff]),
            w2: uniform_tensor(&[d_ff, d], d_ff, rng),
            b2: Tensor::zeros(&[d]),
        }
    }
}

/// Deterministic scaled-uniform initialization (bound `1/sqrt(fan_in)`).
/// `role` decorrelates the streams of models sharing one experiment seed
/// (forecaster vs denoiser vs residual predictor). The output head starts
/// at zero so the untrained network is the identity around its skip paths.
pub fn init_params(hyper: &ForecasterHyper, seed: u64, role: u64) -> Result<ForecasterParams> {
    hyper.validate()?;
    let d = hyper.d_model;
    let mut rng = rng::stream(seed, &[TAG_PARAM_INIT, role]);
    let embed_w = uniform_tensor(&[D_X + D_Y, d], D_X + D_Y, &mut rng);
    let embed_b = Tensor::zeros(&[d]);
    let enc_layers = (0..hyper.n_layers)
        .map(|_| EncoderLayer {
            ln_attn: LayerNormParams::init(d),
            attn: AttentionWeights::init(d, &mut rng),
            ln_ff: LayerNormParams::init(d),
            ff: FeedForward::init(d, hyper.d_ff(), &mut rng),
        })
        .collect();
    let enc_final = LayerNormParams::init(d);
    let dec_query = uniform_tensor(&[hyper.tau, d], d, &mut rng);
    let dec_embed_w = uniform_tensor(&[D_X + D_Y, d], D_X + D_Y, &mut rng);
    let dec_embed_b = Tensor::zeros(&[d]);
    let dec_layers = (0..hyper.n_layers)
        .map(|_| DecoderLayer {
            ln_self: LayerNormParams::init(d),
            self_attn: AttentionWeights::init(d, &mut rng),
            ln_cross: LayerNormParams::init(d),
            cross_attn: AttentionWeights::init(d, &mut rng),
            ln_ff: LayerNormParams::init(d),
            ff: FeedForward::init(d, hyper.d_ff(), &mut rng),
        })
        .collect();
    let dec_final = LayerNormParams::init(d);
    Ok(ForecasterParams {
        hyper: *hyper,
        embed_w,
        embed_b,
        enc_layers,
        enc_final,
        dec_query,
        dec_embed_w,
        dec_embed_b,
        dec_layers,
        dec_final,
        head_w: Tensor::zeros(&[d, D_Y]),
        head_b: Tensor::zeros(&[D_Y]),
    })
}

macro_rules! push_pairs {
    ($out:ident, $prefix:expr, $( $name:literal => $field:expr ),+ $(,)?) => {
        $( $out.push((format!("{}{}", $prefix, $name), $field)); )+
    };
}

impl ForecasterParams {
    /// Stable name/tensor walk; the order defines the optimizer layout and
    /// the checkpoint layout.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        push_pairs!(out, "", "embed.w" => &self.embed_w, "embed.b" => &self.embed_b);
        for (i, l) in self.enc_layers.iter().enumerate() {
            let p = format!("enc.{}.", i);
            push_pairs!(out, p,
                "ln_attn.gain" => &l.ln_attn.gain, "ln_attn.bias" => &l.ln_attn.bias,
                "attn.wq" => &l.attn.wq, "attn.bq" => &l.attn.bq,
                "attn.wk" => &l.attn.wk, "attn.bk" => &l.attn.bk,
                "attn.wv" => &l.attn.wv, "attn.bv" => &l.attn.bv,
                "attn.wo" => &l.attn.wo, "attn.bo" => &l.attn.bo,
                "ln_ff.gain" => &l.ln_ff.gain, "ln_ff.bias" => &l.ln_ff.bias,
                "ff.w1" => &l.ff.w1, "ff.b1" => &l.ff.b1,
                "ff.w2" => &l.ff.w2, "ff.b2" => &l.ff.b2,
            );
        }
        push_pairs!(out, "",
            "enc_final.gain" => &self.enc_final.gain, "enc_final.bias" => &self.enc_final.bias,
            "dec_query" => &self.dec_query,
            "dec_embed.w" => &self.dec_embed_w, "dec_embed.b" => &self.dec_embed_b,
        );
        for (i, l) in self.dec_layers.iter().enumerate() {
            let p = format!("dec.{}.", i);
            push_pairs!(out, p,
                "ln_self.gain" => &l.ln_self.gain, "ln_self.bias" => &l.ln_self.bias,
                "self_attn.wq" => &l.self_attn.wq, "self_attn.bq" => &l.self_attn.bq,
                "self_attn.wk" => &l.self_attn.wk, "self_attn.bk" => &l.self_attn.bk,
                "self_attn.wv" => &l.self_attn.wv, "self_attn.bv" => &l.self_attn.bv,
                "self_attn.wo" => &l.self_attn.wo, "self_attn.bo" => &l.self_attn.bo,
                "ln_cross.gain" => &l.ln_cross.gain, "ln_cross.bias" => &l.ln_cross.bias,
                "cross_attn.wq" => &l.cross_attn.wq, "cross_attn.bq" => &l.cross_attn.bq,
                "cross_attn.wk" => &l.cross_attn.wk, "cross_attn.bk" => &l.cross_attn.bk,
                "cross_attn.wv" => &l.cross_attn.wv, "cross_attn.bv" => &l.cross_attn.bv,
                "cross_attn.wo" => &l.cross_attn.wo, "cross_attn.bo" => &l.cross_attn.bo,
                "ln_ff.gain" => &l.ln_ff.gain, "ln_ff.bias" => &l.ln_ff.bias,
                "ff.w1" => &l.ff.w1, "ff.b1" => &l.ff.b1,
                "ff.w2" => &l.ff.w2, "ff.b2" => &l.ff.b2,
            );
        }
        push_pairs!(out, "",
            "dec_final.gain" => &self.dec_final.gain, "dec_final.bias" => &self.dec_final.bias,
            "head.w" => &self.head_w, "head.b" => &self.head_b,
        );
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        push_pairs!(out, "", "embed.w" => &mut self.embed_w, "embed.b" => &mut self.embed_b);
        for (i, l) in self.enc_layers.iter_mut().enumerate() {
            let p = format!("enc.{}.", i);
            push_pairs!(out, p,
                "ln_attn.gain" => &mut l.ln_attn.gain, "ln_attn.bias" => &mut l.ln_attn.bias,
                "attn.wq" => &mut l.attn.wq, "attn.bq" => &mut l.attn.bq,
                "attn.wk" => &mut l.attn.wk, "attn.bk" => &mut l.attn.bk,
                "attn.wv" => &mut l.attn.wv, "attn.bv" => &mut l.attn.bv,
                "attn.wo" => &mut l.attn.wo, "attn.bo" => &mut l.attn.bo,
                "ln_ff.gain" => &mut l.ln_ff.gain, "ln_ff.bias" => &mut l.ln_ff.bias,
                "ff.w1" => &mut l.ff.w1, "ff.b1" => &mut l.ff.b1,
                "ff.w2" => &mut l.ff.w2, "ff.b2" => &mut l.ff.b2,
            );
        }
        push_pairs!(out, "",
            "enc_final.gain" => &mut self.enc_final.gain, "enc_final.bias" => &mut self.enc_final.bias,
            "dec_query" => &mut self.dec_query,
            "dec_embed.w" => &mut self.dec_embed_w, "dec_embed.b" => &mut self.dec_embed_b,
        );
        for (i, l) in self.dec_layers.iter_mut().enumerate() {
            let p = format!("dec.{}.", i);
            push_pairs!(out, p,
                "ln_self.gain" => &mut l.ln_self.gain, "ln_self.bias" => &mut l.ln_self.bias,
                "self_attn.wq" => &mut l.self_attn.wq, "self_attn.bq" => &mut l.self_attn.bq,
                "self_attn.wk" => &mut l.self_attn.wk, "self_attn.bk" => &mut l.self_attn.bk,
                "self_attn.wv" => &mut l.self_attn.wv, "self_attn.bv" => &mut l.self_attn.bv,
                "self_attn.wo" => &mut l.self_attn.wo, "self_attn.bo" => &mut l.self_attn.bo,
                "ln_cross.gain" => &mut l.ln_cross.gain, "ln_cross.bias" => &mut l.ln_cross.bias,
                "cross_attn.wq" => &mut l.cross_attn.wq, "cross_attn.bq" => &mut l.cross_attn.bq,
                "cross_attn.wk" => &mut l.cross_attn.wk, "cross_attn.bk" => &mut l.cross_attn.bk,
                "cross_attn.wv" => &mut l.cross_attn.wv, "cross_attn.bv" => &mut l.cross_attn.bv,
                "cross_attn.wo" => &mut l.cross_attn.wo, "cross_attn.bo" => &mut l.cross_attn.bo,
                "ln_ff.gain" => &mut l.ln_ff.gain, "ln_ff.bias" => &mut l.ln_ff.bias,
                "ff.w1" => &mut l.ff.w1, "ff.b1" => &mut l.ff.b1,
                "ff.w2" => &mut l.ff.w2, "ff.b2" => &mut l.ff.b2,
            );
        }
        push_pairs!(out, "",
            "dec_final.gain" => &mut self.dec_final.gain, "dec_final.bias" => &mut self.dec_final.bias,
            "head.w" => &mut self.head_w, "head.b" => &mut self.head_b,
        );
        out
    }

    /// Register every tensor on a tape in canonical order.
    pub fn enter(&self, tape: &mut Tape, trainable: bool) -> Result<ForecasterVars> {
        let mut vars = Vec::new();
        for (_, t) in self.tensors() {
            vars.push(if trainable { tape.leaf(t.clone())? } else { tape.constant(t.clone())? });
        }
        Ok(ForecasterVars { hyper: self.hyper, vars })
    }
}

/// Tape handles for one forward pass, in the same canonical order as
/// [`ForecasterParams::tensors`].
pub struct ForecasterVars {
    hyper: ForecasterHyper,
    vars: Vec<Var>,
}

/// Cursor that hands out vars in canonical order, so the forward pass and
/// the parameter walk cannot drift apart silently.
struct VarCursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> VarCursor<'a> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    fn ln(&mut self) -> (Var, Var) {
        (self.next(), self.next())
    }

    fn attn(&mut self) -> [Var; 8] {
        [
            self.next(),
            self.next(),
            self.next(),
            self.next(),
            self.next(),
            self.next(),
            self.next(),
            self.next(),
        ]
    }

    fn ff(&mut self) -> [Var; 4] {
        [self.next(), self.next(), self.next(), self.next()]
    }
}

impl ForecasterVars {
    pub fn hyper(&self) -> &ForecasterHyper {
        &self.hyper
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }

    fn cursor(&self) -> VarCursor<'_> {
        VarCursor { vars: &self.vars, pos: 0 }
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

fn multi_head_attention(
    tape: &mut Tape,
    q_in: Var,
    kv_in: Var,
    w: &[Var; 8],
    n_heads: usize,
    n_blocks: usize,
) -> Result<Var> {
    let [wq, bq, wk, bk, wv, bv, wo, bo] = *w;
    let q = linear(tape, q_in, wq, bq)?;
    let k = linear(tape, kv_in, wk, bk)?;
    let v = linear(tape, kv_in, wv, bv)?;
    let merged = tape.mha(q, k, v, n_heads, n_blocks)?;
    linear(tape, merged, wo, bo)
}

fn feed_forward(tape: &mut Tape, x: Var, w: &[Var; 4]) -> Result<Var> {
    let [w1, b1, w2, b2] = *w;
    let h = linear(tape, x, w1, b1)?;
    let h = tape.gelu(h)?;
    linear(tape, h, w2, b2)
}

/// Encoder memory for `n_blocks` stacked lookback windows `[n*kappa, d_x+1]`.
/// Blocks never attend across their boundary, so a whole batch shares one
/// tape and the matmuls run at batch width.
pub fn encode(tape: &mut Tape, params: &ForecasterVars, x_past: Var, n_blocks: usize) -> Result<Var> {
    let n_heads = params.hyper.n_heads;
    let mut cur = params.cursor();
    let (ew, eb) = (cur.next(), cur.next());
    let mut h = linear(tape, x_past, ew, eb)?;
    for _ in 0..params.hyper.n_layers {
        let (g1, b1) = cur.ln();
        let attn_w = cur.attn();
        let (g2, b2) = cur.ln();
        let ff_w = cur.ff();
        let normed = tape.layer_norm(h, g1, b1)?;
        let a = multi_head_attention(tape, normed, normed, &attn_w, n_heads, n_blocks)?;
        h = tape.add(h, a)?;
        let normed = tape.layer_norm(h, g2, b2)?;
        let f = feed_forward(tape, normed, &ff_w)?;
        h = tape.add(h, f)?;
    }
    let (gf, bf) = cur.ln();
    tape.layer_norm(h, gf, bf)
}

/// Shared decoder: learned horizon queries plus an embedding of the future
/// covariates and a target slot (`y_slot`), attending into `memory`.
/// Returns the pre-head stream `[n_blocks*tau, d_model]`.
fn decode(
    tape: &mut Tape,
    params: &ForecasterVars,
    memory: Var,
    cov_future: Var,
    y_slot: Var,
    n_blocks: usize,
) -> Result<Var> {
    let n_heads = params.hyper.n_heads;
    let n_layers = params.hyper.n_layers;
    let mut cur = params.cursor();
    // Skip encoder weights: embed pair, per-layer blocks, final norm.
    cur.pos = 2 + n_layers * 16 + 2;
    let dec_query = cur.next();
    let queries = if n_blocks == 1 { dec_query } else { tape.tile_rows(dec_query, n_blocks)? };
    let (dw, db) = (cur.next(), cur.next());
    let dec_in = tape.concat_cols(&[cov_future, y_slot])?;
    let embedded = linear(tape, dec_in, dw, db)?;
    let mut h = tape.add(queries, embedded)?;
    for _ in 0..n_layers {
        let (g1, b1) = cur.ln();
        let self_w = cur.attn();
        let (g2, b2) = cur.ln();
        let cross_w = cur.attn();
        let (g3, b3) = cur.ln();
        let ff_w = cur.ff();
        let normed = tape.layer_norm(h, g1, b1)?;
        let a = multi_head_attention(tape, normed, normed, &self_w, n_heads, n_blocks)?;
        h = tape.add(h, a)?;
        let normed = tape.layer_norm(h, g2, b2)?;
        let c = multi_head_attention(tape, normed, memory, &cross_w, n_heads, n_blocks)?;
        h = tape.add(h, c)?;
        let normed = tape.layer_norm(h, g3, b3)?;
        let f = feed_forward(tape, normed, &ff_w)?;
        h = tape.add(h, f)?;
    }
    let (gf, bf) = cur.ln();
    tape.layer_norm(h, gf, bf)
}

fn head(tape: &mut Tape, params: &ForecasterVars, stream: Var) -> Result<Var> {
    let n = params.vars.len();
    linear(tape, stream, params.vars[n - 2], params.vars[n - 1])
}

/// Multi-horizon forecast `[n_blocks*tau, 1]` from stacked lookback windows.
pub fn forecast(
    tape: &mut Tape,
    params: &ForecasterVars,
    x_past: Var,
    cov_future: Var,
    n_blocks: usize,
) -> Result<Var> {
    let memory = encode(tape, params, x_past, n_blocks)?;
    forecast_with_memory(tape, params, memory, cov_future, n_blocks)
}

/// Forecast reusing an already-computed encoder memory.
pub fn forecast_with_memory(
    tape: &mut Tape,
    params: &ForecasterVars,
    memory: Var,
    cov_future: Var,
    n_blocks: usize,
) -> Result<Var> {
    let tau = params.hyper.tau;
    let y_slot = tape.constant(Tensor::zeros(&[n_blocks * tau, 1]))?;
    let stream = decode(tape, params, memory, cov_future, y_slot, n_blocks)?;
    head(tape, params, stream)
}

/// Denoised horizon: the network's output is a correction added onto the
/// corrupted input, so zero-initialized head weights make this the identity.
pub fn denoise(
    tape: &mut Tape,
    params: &ForecasterVars,
    x_past: Var,
    cov_future: Var,
    y_blurred: Var,
    n_blocks: usize,
) -> Result<Var> {
    let memory = encode(tape, params, x_past, n_blocks)?;
    let stream = decode(tape, params, memory, cov_future, y_blurred, n_blocks)?;
    let correction = head(tape, params, stream)?;
    tape.add(y_blurred, correction)
}
