//! Independent reference computations backing the verification suite:
//! finite differences, exhaustive metric enumeration, brute-force zero-out
//! damage, and rank statistics. Nothing here shares code with the paths it
//! checks beyond plain forward evaluation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::activation::Activation;
use crate::nn::autodiff::batch_mean_gradient;
use crate::nn::forward::mean_loss;
use crate::nn::model::{init_random, Batch, Model, ModelSpec};
use crate::scalar::Precision;

/// Margin every hidden pre-activation must keep from the ELU/RELU kink at 0
/// so central differences never straddle it.
pub const KINK_MARGIN: f64 = 0.05;

/// Draws a random model and batch, retrying with derived seeds until no
/// hidden pre-activation sits within [`KINK_MARGIN`] of an activation kink
/// and no score is near the clamp region. Deterministic per seed.
pub fn safe_random_instance(spec: &ModelSpec, seed: u64, n: usize) -> (Model, Vec<f32>, Vec<u8>) {
    for attempt in 0..1000u64 {
        let s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(attempt);
        let model = init_random(spec, s).expect("valid spec");
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0xdead_beef);
        let feats: Vec<f32> = (0..n * spec.input_dim)
            .map(|_| rng.gen_range(-1.5..1.5))
            .collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen::<f32>() < 0.5)).collect();
        if instance_has_margin(&model, &feats, n) {
            return (model, feats, labels);
        }
    }
    panic!("no kink-safe instance found for seed {seed}");
}

fn instance_has_margin(model: &Model, feats: &[f32], n: usize) -> bool {
    use crate::nn::forward::{forward_sample, ForwardScratch};
    let mut scratch = ForwardScratch::<f64>::for_model(model);
    let dim = model.spec.input_dim;
    for i in 0..n {
        let logit = forward_sample(model, &feats[i * dim..(i + 1) * dim], &mut scratch);
        if logit.abs() > 12.0 {
            return false;
        }
        for (li, layer) in model.layers.iter().enumerate() {
            if matches!(layer.activation, Activation::Elu | Activation::Relu) {
                for o in 0..layer.out_dim {
                    if scratch.u[li][o].abs() < KINK_MARGIN {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// Central finite difference of the mean batch loss for every parameter.
/// Parameters live on the f32 grid, so the divisor is the step actually
/// realized after rounding, not the nominal one.
pub fn fd_gradient(model: &Model, batch: &Batch<'_>, step: f64) -> Vec<f64> {
    let p = model.param_count();
    let mut m = model.clone();
    let mut out = Vec::with_capacity(p);
    for i in 0..p {
        let r = m.param_ref_at(i).unwrap();
        let orig = m.get_param(r);
        let plus = (orig as f64 + step) as f32;
        let minus = (orig as f64 - step) as f32;
        m.set_param(r, plus);
        let lp = mean_loss(&m, batch, Precision::F64).unwrap();
        m.set_param(r, minus);
        let lm = mean_loss(&m, batch, Precision::F64).unwrap();
        m.set_param(r, orig);
        out.push((lp - lm) / (plus as f64 - minus as f64));
    }
    out
}

/// Central finite difference of the analytic batch gradient: the reference
/// for the Hessian diagonal.
pub fn fd_hessian_diag(model: &Model, batch: &Batch<'_>, step: f64) -> Vec<f64> {
    let p = model.param_count();
    let mut m = model.clone();
    let mut out = Vec::with_capacity(p);
    for i in 0..p {
        let r = m.param_ref_at(i).unwrap();
        let orig = m.get_param(r);
        let plus = (orig as f64 + step) as f32;
        let minus = (orig as f64 - step) as f32;
        m.set_param(r, plus);
        let gp = batch_mean_gradient(&m, batch, Precision::F64).unwrap()[i];
        m.set_param(r, minus);
        let gm = batch_mean_gradient(&m, batch, Precision::F64).unwrap()[i];
        m.set_param(r, orig);
        out.push((gp - gm) / (plus as f64 - minus as f64));
    }
    out
}

/// Second difference of the mean loss itself. Parameters sit on the f32
/// grid, so the realized up/down steps `b = plus - orig`, `a = orig - minus`
/// are slightly asymmetric; the three-point quadratic fit
/// `2 (b L(-a) - (a+b) L(0) + a L(+b)) / (a b (a+b))` stays exact for that.
pub fn fd_hessian_diag_from_loss(model: &Model, batch: &Batch<'_>, step: f64) -> Vec<f64> {
    let p = model.param_count();
    let mut m = model.clone();
    let base = mean_loss(&m, batch, Precision::F64).unwrap();
    let mut out = Vec::with_capacity(p);
    for i in 0..p {
        let r = m.param_ref_at(i).unwrap();
        let orig = m.get_param(r);
        let plus = (orig as f64 + step) as f32;
        let minus = (orig as f64 - step) as f32;
        m.set_param(r, plus);
        let lp = mean_loss(&m, batch, Precision::F64).unwrap();
        m.set_param(r, minus);
        let lm = mean_loss(&m, batch, Precision::F64).unwrap();
        m.set_param(r, orig);
        let a = orig as f64 - minus as f64;
        let b = plus as f64 - orig as f64;
        out.push(2.0 * (b * lm - (a + b) * base + a * lp) / (a * b * (a + b)));
    }
    out
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_gradient_fd_error(
    model: &Model,
    batch: &Batch<'_>,
    analytic: &[f64],
    step: f64,
) -> f64 {
    fd_gradient(model, batch, step)
        .iter()
        .zip(analytic)
        .map(|(&n, &a)| relative_error(a, n, 1e-3))
        .fold(0.0, f64::max)
}

pub fn max_hessian_fd_error(model: &Model, batch: &Batch<'_>, analytic: &[f64], step: f64) -> f64 {
    fd_hessian_diag(model, batch, step)
        .iter()
        .zip(analytic)
        .map(|(&n, &a)| relative_error(a, n, 1e-3))
        .fold(0.0, f64::max)
}

/// True loss change from zeroing each prunable (hidden weight/bias)
/// parameter, computed by exhaustive re-evaluation in canonical report
/// order. Quadratic in parameter count; keep the model small.
pub fn zero_out_damage(model: &Model, batch: &Batch<'_>) -> Result<Vec<f64>> {
    let base = mean_loss(model, batch, Precision::F64)?;
    let mut m = model.clone();
    let mut out = Vec::new();
    for li in 0..model.hidden_count() {
        let (out_dim, in_dim) = (model.layers[li].out_dim, model.layers[li].in_dim);
        for row in 0..out_dim {
            for col in 0..in_dim {
                let orig = m.layers[li].weights[row * in_dim + col];
                m.layers[li].weights[row * in_dim + col] = 0.0;
                out.push(mean_loss(&m, batch, Precision::F64)? - base);
                m.layers[li].weights[row * in_dim + col] = orig;
            }
        }
        for row in 0..out_dim {
            let orig = m.layers[li].bias[row];
            m.layers[li].bias[row] = 0.0;
            out.push(mean_loss(&m, batch, Precision::F64)? - base);
            m.layers[li].bias[row] = orig;
        }
    }
    Ok(out)
}

/// AUC by direct enumeration of every positive/negative pair, ties counted
/// half.
pub fn exhaustive_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0f64;
    let mut pairs = 0.0f64;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Best TPR over every candidate threshold (predict positive at
/// `score >= t`) whose empirical FPR does not exceed `target`.
pub fn exhaustive_tpr_at_fpr(scores: &[f64], labels: &[u8], target: f64) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.push(f64::INFINITY);
    let mut best = 0.0f64;
    for &t in &thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (i, &s) in scores.iter().enumerate() {
            if s >= t {
                if labels[i] == 1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let fpr = fp as f64 / n_neg as f64;
        if fpr <= target {
            best = best.max(tp as f64 / n_pos as f64);
        }
    }
    best
}

fn midranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with midranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ra = midranks(a);
    let rb = midranks(b);
    crate::metrics::pearson(&ra, &rb).unwrap_or(0.0)
}
