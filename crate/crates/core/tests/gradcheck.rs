//! Central finite-difference validation of every tape primitive and of the
//! full GP-blur compound loss with respect to parameters of all three
//! submodels.

use blurcast_core::data::TimeSeriesWindow;
use blurcast_core::forecaster::ForecasterHyper;
use blurcast_core::pipeline::{
    compound_forward, compound_loss, enter_window, regularizer_term, ModelParams, Mode, Variant,
};
use blurcast_core::rng;
use blurcast_core::tape::{Tape, Var};
use blurcast_core::tensor::Tensor;
use rand_chacha::rand_core::RngCore;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-7;
const SEEDS: u64 = 20;

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    lo + u * (hi - lo)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| uniform(rng, lo, hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Scalar loss built from an op's output and fixed random weights, so every
/// output element influences the loss asymmetrically.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Var {
    let w = tape.constant(weights.clone()).unwrap();
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod).unwrap()
}

/// Check d(loss)/d(inputs) against central differences for a loss builder.
fn check_grads<F>(name: &str, inputs: &[Tensor], build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v, &tape)).collect();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> =
            perturbed.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item()
    };

    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus: Vec<Tensor> = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let ad = analytic[i].data()[j];
            let tol = REL_TOL * ad.abs().max(fd.abs()) + ABS_FLOOR;
            assert!(
                (ad - fd).abs() <= tol,
                "{}: input {} element {}: analytic {} vs fd {}",
                name,
                i,
                j,
                ad,
                fd
            );
        }
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, &[900]);
        let w23 = rand_tensor(&mut r, &[2, 3], -1.0, 1.0);
        let w34 = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
        let w32 = rand_tensor(&mut r, &[3, 2], -1.0, 1.0);
        let w35 = rand_tensor(&mut r, &[3, 5], -1.0, 1.0);
        let w44 = rand_tensor(&mut r, &[4, 4], -1.0, 1.0);
        let w42 = rand_tensor(&mut r, &[4, 2], -1.0, 1.0);
        let w4 = rand_tensor(&mut r, &[4], -1.0, 1.0);
        let c = uniform(&mut r, -2.0, 2.0);

        let a = rand_tensor(&mut r, &[2, 3], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[2, 3], -1.0, 1.0);
        let row = rand_tensor(&mut r, &[1, 3], -1.0, 1.0);
        let col = rand_tensor(&mut r, &[2, 1], -1.0, 1.0);

        check_grads("add", &[a.clone(), b.clone()], |t, v| {
            let o = t.add(v[0], v[1]).unwrap();
            weighted_sum(t, o, &w23)
        });
        check_grads("sub", &[a.clone(), b.clone()], |t, v| {
            let o = t.sub(v[0], v[1]).unwrap();
            weighted_sum(t, o, &w23)
        });
        check_grads("mul", &[a.clone(), b.clone()], |t, v| {
            let o = t.mul(v[0], v[1]).unwrap();
            weighted_sum(t, o, &w23)
        });
        check_grads("mul broadcast row", &[a.clone(), row.clone()], |t, v| {
            let o = t.mul(v[0], v[1]).unwrap();
            weighted_sum(t, o, &w23)
        });
        check_grads("add broadcast col x row", &[col.clone(), row.clone()], |t, v| {
            let o = t.add(v[0], v[1]).unwrap();
            weighted_sum(t, o, &w23)
        });
        check_grads("scale", &[a.clone()], |t, v| {
            let o = t.scale(v[0], c).unwrap();
            weighted_sum(t, o, &w23)
        });
        check_grads("neg", &[a.clone()], |t, v| {
            let o = t.neg(v[0]).unwrap();
            weighted_sum(t, o, &w23)
        });
        check_grads("exp", &[a.clone()], |t, v| {
            let o = t.exp(v[0]).unwrap();
            weighted_sum(t, o, &w23)
        });
        let pos = rand_tensor(&mut r, &[2, 3], 0.5, 2.0);
        check_grads("ln", &[pos], |t, v| {
            let o = t.ln(v[0]).unwrap();
            weighted_sum(t, o, &w23)
        });
        check_grads("square", &[a.clone()], |t, v| {
            let o = t.square(v[0]).unwrap();
            weighted_sum(t, o, &w23)
        });
        check_grads("gelu", &[a.clone()], |t, v| {
            let o = t.gelu(v[0]).unwrap();
            weighted_sum(t, o, &w23)
        });
        check_grads("mean", &[a.clone()], |t, v| t.mean(v[0]).unwrap());
        check_grads("sum", &[a.clone()], |t, v| t.sum(v[0]).unwrap());

        let sm_in = rand_tensor(&mut r, &[3, 4], -2.0, 2.0);
        check_grads("softmax rows", &[sm_in.clone()], |t, v| {
            let o = t.softmax(v[0], 1).unwrap();
            weighted_sum(t, o, &w34)
        });
        check_grads("softmax cols", &[sm_in], |t, v| {
            let o = t.softmax(v[0], 0).unwrap();
            weighted_sum(t, o, &w34)
        });

        let ln_x = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
        let gain = rand_tensor(&mut r, &[4], 0.5, 1.5);
        let bias = rand_tensor(&mut r, &[4], -0.5, 0.5);
        check_grads("layer_norm", &[ln_x, gain, bias], |t, v| {
            let o = t.layer_norm(v[0], v[1], v[2]).unwrap();
            weighted_sum(t, o, &w34)
        });

        let m1 = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
        let m2 = rand_tensor(&mut r, &[4, 2], -1.0, 1.0);
        check_grads("matmul", &[m1.clone(), m2], |t, v| {
            let o = t.matmul(v[0], v[1]).unwrap();
            weighted_sum(t, o, &w32)
        });
        check_grads("transpose", &[m1.clone()], |t, v| {
            let o = t.transpose(v[0]).unwrap();
            let o2 = t.transpose(o).unwrap();
            weighted_sum(t, o2, &w34)
        });
        check_grads("reshape", &[m1.clone()], |t, v| {
            let o = t.reshape(v[0], &[2, 6]).unwrap();
            let o2 = t.reshape(o, &[3, 4]).unwrap();
            weighted_sum(t, o2, &w34)
        });
        let wide = rand_tensor(&mut r, &[3, 6], -1.0, 1.0);
        check_grads("slice_cols", &[wide], |t, v| {
            let o = t.slice_cols(v[0], 1, 4).unwrap();
            weighted_sum(t, o, &w34)
        });
        let left = rand_tensor(&mut r, &[3, 2], -1.0, 1.0);
        let right = rand_tensor(&mut r, &[3, 3], -1.0, 1.0);
        check_grads("concat_cols", &[left, right], |t, v| {
            let o = t.concat_cols(&[v[0], v[1]]).unwrap();
            weighted_sum(t, o, &w35)
        });

        let tall = rand_tensor(&mut r, &[4, 2], -1.0, 1.0);
        let w22 = rand_tensor(&mut r, &[2, 2], -1.0, 1.0);
        check_grads("slice_rows", &[tall], |t, v| {
            let o = t.slice_rows(v[0], 1, 2).unwrap();
            weighted_sum(t, o, &w22)
        });
        let w43 = rand_tensor(&mut r, &[4, 3], -1.0, 1.0);
        check_grads("tile_rows", &[a.clone()], |t, v| {
            let o = t.tile_rows(v[0], 2).unwrap();
            weighted_sum(t, o, &w43)
        });

        let q1 = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
        let kv1 = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
        check_grads("attention", &[q1, kv1.clone(), kv1], |t, v| {
            let o = t.mha(v[0], v[1], v[2], 2, 1).unwrap();
            weighted_sum(t, o, &w34)
        });
        let q2 = rand_tensor(&mut r, &[4, 4], -1.0, 1.0);
        let k2 = rand_tensor(&mut r, &[6, 4], -1.0, 1.0);
        let v2 = rand_tensor(&mut r, &[6, 4], -1.0, 1.0);
        check_grads("attention blocks", &[q2, k2, v2], |t, v| {
            let o = t.mha(v[0], v[1], v[2], 2, 2).unwrap();
            weighted_sum(t, o, &w44)
        });

        let sq = rand_tensor(&mut r, &[4, 4], -1.0, 1.0);
        check_grads("diag_part", &[sq.clone()], |t, v| {
            let o = t.diag_part(v[0]).unwrap();
            weighted_sum(t, o, &w4)
        });
        let vec4 = rand_tensor(&mut r, &[4], -1.0, 1.0);
        check_grads("diag_embed", &[vec4], |t, v| {
            let o = t.diag_embed(v[0]).unwrap();
            weighted_sum(t, o, &w44)
        });

        // Cholesky of B Bᵀ + 2I keeps the factorization well conditioned
        // while finite differences perturb B.
        let chol_builder = |t: &mut Tape, v: &[Var]| -> Var {
            let bt = t.transpose(v[0]).unwrap();
            let gram = t.matmul(v[0], bt).unwrap();
            let eye = t.constant(Tensor::eye(4)).unwrap();
            let shifted = t.scale(eye, 2.0).unwrap();
            let spd = t.add(gram, shifted).unwrap();
            t.cholesky(spd).unwrap()
        };
        check_grads("cholesky", &[sq.clone()], |t, v| {
            let l = chol_builder(t, v);
            weighted_sum(t, l, &w44)
        });
        check_grads("triangular_solve", &[sq.clone(), w42.clone()], |t, v| {
            let l = chol_builder(t, v);
            let x = t.triangular_solve(l, v[1]).unwrap();
            weighted_sum(t, x, &w42)
        });

        // detach must yield an exactly zero gradient, not a finite-difference one
        let mut tape = Tape::new();
        let x = tape.leaf(a.clone()).unwrap();
        let d = tape.detach(x).unwrap();
        let s = tape.sum(d).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.wrt(x, &tape).data().iter().all(|&g| g == 0.0));
    }
}

fn toy_window(r: &mut ChaCha8Rng, kappa: usize, tau: usize) -> TimeSeriesWindow {
    TimeSeriesWindow {
        x_past: rand_tensor(r, &[kappa, 5], -1.0, 1.0),
        cov_future: rand_tensor(r, &[tau, 4], -1.0, 1.0),
        y_future: rand_tensor(r, &[tau, 1], -1.0, 1.0),
        start: 0,
    }
}

/// The full GP-blur compound loss against finite differences over a random
/// five-parameter subset of each submodel (forecaster, blur, denoiser).
#[test]
fn dg_compound_loss_matches_finite_differences() {
    let hyper = ForecasterHyper { d_model: 8, n_heads: 2, n_layers: 1, kappa: 6, tau: 6 };
    let lambda = 0.5;

    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, &[901]);
        let model = ModelParams::init(Variant::DenoiseGp, &hyper, 4, seed ^ 0x5a5a).unwrap();
        let window = toy_window(&mut r, 6, 6);
        let eps: Vec<f64> = (0..6).map(|_| uniform(&mut r, -1.5, 1.5)).collect();

        let loss_value = |m: &ModelParams| -> f64 {
            let mut tape = Tape::new();
            let vars = m.enter(&mut tape, true).unwrap();
            let win = enter_window(&mut tape, &window).unwrap();
            let out =
                compound_forward(&mut tape, Variant::DenoiseGp, Mode::Train, &vars, &win, &eps)
                    .unwrap();
            let bound =
                regularizer_term(&mut tape, Variant::DenoiseGp, &vars, &win, &out, false).unwrap();
            let loss =
                compound_loss(&mut tape, Variant::DenoiseGp, &out, &win, bound, lambda).unwrap();
            tape.value(loss).item()
        };

        let (analytic, names) = {
            let mut tape = Tape::new();
            let vars = model.enter(&mut tape, true).unwrap();
            let win = enter_window(&mut tape, &window).unwrap();
            let out =
                compound_forward(&mut tape, Variant::DenoiseGp, Mode::Train, &vars, &win, &eps)
                    .unwrap();
            let bound =
                regularizer_term(&mut tape, Variant::DenoiseGp, &vars, &win, &out, false).unwrap();
            let loss =
                compound_loss(&mut tape, Variant::DenoiseGp, &out, &win, bound, lambda).unwrap();
            let grads = tape.backward(loss).unwrap();
            let g: Vec<Tensor> =
                vars.all_vars().iter().map(|v| grads.wrt(*v, &tape)).collect();
            let n: Vec<String> = model.named_tensors().iter().map(|(n, _)| n.clone()).collect();
            (g, n)
        };

        // five random coordinates from each submodel's parameter range
        let boundaries: Vec<(usize, usize)> = {
            let fc = model.forecaster.tensors().len();
            let gp = 6;
            let total = names.len();
            vec![(0, fc), (fc, fc + gp), (fc + gp, total)]
        };
        for &(lo, hi) in &boundaries {
            for _ in 0..5 {
                let ti = lo + (r.next_u64() as usize) % (hi - lo);
                let numel = analytic[ti].numel();
                let j = (r.next_u64() as usize) % numel;

                let mut plus = model.clone();
                plus.named_tensors_mut()[ti].1.data_mut()[j] += H;
                let mut minus = model.clone();
                minus.named_tensors_mut()[ti].1.data_mut()[j] -= H;
                let fd = (loss_value(&plus) - loss_value(&minus)) / (2.0 * H);
                let ad = analytic[ti].data()[j];
                let tol = REL_TOL * ad.abs().max(fd.abs()) + ABS_FLOOR;
                assert!(
                    (ad - fd).abs() <= tol,
                    "seed {}: {}[{}]: analytic {} vs fd {}",
                    seed,
                    names[ti],
                    j,
                    ad,
                    fd
                );
            }
        }
    }
}
