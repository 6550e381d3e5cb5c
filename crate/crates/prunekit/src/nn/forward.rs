//! Forward evaluation and the binary cross-entropy loss.
//!
//! Eval mode is fully deterministic: batch-norm normalizes with the running
//! statistics and dropout is skipped. Train mode additionally applies
//! inverted dropout (kept activations scaled by `1/(1-rate)`) with a seeded
//! mask stream; it is exposed for inspection but never updates running
//! statistics — only [`super::train::train`] does that.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{Batch, Model, BN_EPS};
use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};

/// Scores are clamped to `[CLAMP, 1 - CLAMP]` before entering the log loss,
/// which bounds every derivative the damage estimators consume.
pub const SCORE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::ZERO {
        S::ONE / (S::ONE + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::ONE + e)
    }
}

/// Per-layer forward state for one sample, reused across samples.
pub(crate) struct ForwardScratch<S> {
    /// Input to each layer; `acts[0]` is the sample itself.
    pub acts: Vec<Vec<S>>,
    /// Pre-batch-norm affine output per layer.
    pub z: Vec<Vec<S>>,
    /// Normalized `(z - mean)/sqrt(var + eps)` per layer (identity when the
    /// layer has no batch-norm).
    pub zhat: Vec<Vec<S>>,
    /// Post-batch-norm pre-activation per layer.
    pub u: Vec<Vec<S>>,
    /// Dropout multiplier per unit (1 or 1/(1-rate) or 0); all-ones in eval.
    pub drop: Vec<Vec<S>>,
}

impl<S: Scalar> ForwardScratch<S> {
    pub fn for_model(model: &Model) -> Self {
        let mut acts = vec![vec![S::ZERO; model.spec.input_dim]];
        let mut z = Vec::new();
        let mut zhat = Vec::new();
        let mut u = Vec::new();
        let mut drop = Vec::new();
        for l in &model.layers {
            acts.push(vec![S::ZERO; l.out_dim]);
            z.push(vec![S::ZERO; l.out_dim]);
            zhat.push(vec![S::ZERO; l.out_dim]);
            u.push(vec![S::ZERO; l.out_dim]);
            drop.push(vec![S::ONE; l.out_dim]);
        }
        ForwardScratch {
            acts,
            z,
            zhat,
            u,
            drop,
        }
    }
}

/// Runs one sample through the network, filling `scratch` and returning the
/// output logit. `drop` multipliers must already be set (all-ones for eval).
pub(crate) fn forward_sample<S: Scalar>(
    model: &Model,
    features: &[f32],
    scratch: &mut ForwardScratch<S>,
) -> S {
    for (dst, &x) in scratch.acts[0].iter_mut().zip(features) {
        *dst = S::from_f32(x);
    }
    let n_layers = model.layers.len();
    for li in 0..n_layers {
        let layer = &model.layers[li];
        let (before, after) = scratch.acts.split_at_mut(li + 1);
        let x = &before[li];
        let out = &mut after[0];
        for o in 0..layer.out_dim {
            let mut sum = S::from_f32(layer.bias[o]);
            let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            for (w, xi) in row.iter().zip(x.iter()) {
                sum += S::from_f32(*w) * *xi;
            }
            scratch.z[li][o] = sum;
            let (zh, uo) = match &layer.batchnorm {
                Some(bn) => {
                    let inv_sd =
                        S::ONE / (S::from_f32(bn.running_var[o]) + S::from_f32(BN_EPS)).sqrt();
                    let zh = (sum - S::from_f32(bn.running_mean[o])) * inv_sd;
                    (zh, S::from_f32(bn.gamma[o]) * zh + S::from_f32(bn.beta[o]))
                }
                None => (sum, sum),
            };
            scratch.zhat[li][o] = zh;
            scratch.u[li][o] = uo;
            out[o] = layer.activation.eval(uo) * scratch.drop[li][o];
        }
    }
    scratch.acts[n_layers][0]
}

/// Sets per-unit dropout multipliers for the next sample: seeded Bernoulli
/// keep-masks with inverted scaling when `rng` is given, all-ones otherwise.
pub(crate) fn fill_dropout_multipliers<S: Scalar>(
    model: &Model,
    mut rng: Option<&mut ChaCha8Rng>,
    scratch: &mut ForwardScratch<S>,
) {
    for (li, layer) in model.layers.iter().enumerate() {
        let rate = layer.dropout;
        match rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let keep_scale = S::from_f32(1.0 / (1.0 - rate));
                for d in scratch.drop[li].iter_mut() {
                    *d = if rng.gen::<f32>() < rate {
                        S::ZERO
                    } else {
                        keep_scale
                    };
                }
            }
            _ => {
                for d in scratch.drop[li].iter_mut() {
                    *d = S::ONE;
                }
            }
        }
    }
}

fn logits_impl<S: Scalar>(
    model: &Model,
    features: &[f32],
    n: usize,
    dim: usize,
    mode: Mode,
    dropout_seed: u64,
) -> Result<Vec<f64>> {
    if dim != model.spec.input_dim {
        return Err(Error::Mismatch(format!(
            "feature width {dim} != model input_dim {}",
            model.spec.input_dim
        )));
    }
    if features.len() != n * dim {
        return Err(Error::Mismatch("feature buffer length".into()));
    }
    let needs_rng =
        mode == Mode::Train && model.layers.iter().any(|l| l.dropout > 0.0);
    let mut rng = needs_rng.then(|| ChaCha8Rng::seed_from_u64(dropout_seed));
    let mut scratch = ForwardScratch::<S>::for_model(model);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        fill_dropout_multipliers(model, rng.as_mut(), &mut scratch);
        let logit = forward_sample(model, &features[i * dim..(i + 1) * dim], &mut scratch);
        let v = logit.to_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("logit for sample {i}")));
        }
        out.push(v);
    }
    Ok(out)
}

/// Pre-sigmoid outputs, one per sample.
pub fn logits(
    model: &Model,
    features: &[f32],
    n: usize,
    dim: usize,
    mode: Mode,
    dropout_seed: u64,
    precision: Precision,
) -> Result<Vec<f64>> {
    match precision {
        Precision::F32 => logits_impl::<f32>(model, features, n, dim, mode, dropout_seed),
        Precision::F64 => logits_impl::<f64>(model, features, n, dim, mode, dropout_seed),
    }
}

/// Sigmoid scores in (0, 1), one per sample.
pub fn forward(
    model: &Model,
    features: &[f32],
    n: usize,
    dim: usize,
    mode: Mode,
    dropout_seed: u64,
    precision: Precision,
) -> Result<Vec<f64>> {
    Ok(logits(model, features, n, dim, mode, dropout_seed, precision)?
        .into_iter()
        .map(sigmoid::<f64>)
        .collect())
}

/// Eval-mode scores for a batch in the given precision.
pub fn scores(model: &Model, batch: &Batch<'_>, precision: Precision) -> Result<Vec<f64>> {
    forward(
        model,
        batch.features,
        batch.n,
        batch.dim,
        Mode::Eval,
        0,
        precision,
    )
}

/// Per-sample binary cross-entropy with the documented clamp.
pub fn loss(scores: &[f64], labels: &[u8]) -> Result<Vec<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Mismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(scores
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .collect())
}

/// Mean eval-mode loss of a model over a batch.
pub fn mean_loss(model: &Model, batch: &Batch<'_>, precision: Precision) -> Result<f64> {
    let s = scores(model, batch, precision)?;
    let per = loss(&s, batch.labels)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Eval-mode mean loss with selected hidden neurons' outputs forced to zero.
/// `dropped` is indexed over hidden neurons in (layer, neuron) order and
/// applies no compensating rescale: the loss change is attributed to the
/// dropped neurons alone.
pub fn mean_loss_with_dropped_neurons(
    model: &Model,
    batch: &Batch<'_>,
    dropped: &[bool],
) -> Result<f64> {
    let total = model.total_hidden_neurons();
    if dropped.len() != total {
        return Err(Error::Mismatch(format!(
            "{} drop flags for {total} hidden neurons",
            dropped.len()
        )));
    }
    let mut scratch = ForwardScratch::<f64>::for_model(model);
    // Encode the drop pattern as dropout multipliers: 0 for dropped, 1 kept.
    let mut off = 0usize;
    for (li, layer) in model.layers.iter().enumerate() {
        if li < model.hidden_count() {
            for o in 0..layer.out_dim {
                scratch.drop[li][o] = if dropped[off + o] { 0.0 } else { 1.0 };
            }
            off += layer.out_dim;
        }
    }
    let mut total_loss = 0.0;
    for i in 0..batch.n {
        let logit = forward_sample(model, batch.row(i), &mut scratch);
        let p = sigmoid(logit).clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
        total_loss += if batch.labels[i] == 1 {
            -p.ln()
        } else {
            -(1.0 - p).ln()
        };
    }
    Ok(total_loss / batch.n as f64)
}
