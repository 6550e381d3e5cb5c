//! Mini-batch SGD training in 32-bit production arithmetic.
//!
//! Plain SGD with a fixed learning rate, shuffled epochs, inverted dropout,
//! and masked parameters pinned to zero (their gradients are dropped before
//! the update, so a pruned value never moves). Batch-norm normalizes with
//! the running statistics throughout; each batch updates those statistics
//! with momentum after its gradient step, so gradients are exact for the
//! function actually evaluated. Deterministic for a fixed seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::autodiff::{layer_offsets, per_sample_pass, DerivScratch};
use super::forward::fill_dropout_multipliers;
use super::model::{Batch, Model};
use crate::error::{Error, Result};

/// Momentum for the running-statistics update.
const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 128,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

/// Trains a copy of `model` on `data` and returns it. `epochs == 0` returns
/// the model bitwise unchanged.
pub fn train(model: &Model, data: &Batch<'_>, cfg: &TrainConfig) -> Result<Model> {
    if data.dim != model.spec.input_dim {
        return Err(Error::Mismatch(format!(
            "feature width {} != model input_dim {}",
            data.dim, model.spec.input_dim
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut m = model.clone();
    if cfg.epochs == 0 {
        return Ok(m);
    }
    let p = m.param_count();
    let offsets = layer_offsets(&m);
    let has_dropout = m.layers.iter().any(|l| l.dropout > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.n).collect();
    let mut scratch = DerivScratch::<f32>::for_model(&m);
    let mut grad = vec![0.0f32; p];
    let mut acc = vec![0.0f32; p];
    // Per-unit z statistics for the batch-norm running update.
    let bn_widths: Vec<usize> = m
        .layers
        .iter()
        .map(|l| if l.batchnorm.is_some() { l.out_dim } else { 0 })
        .collect();
    let mut z_sum: Vec<Vec<f64>> = bn_widths.iter().map(|&w| vec![0.0; w]).collect();
    let mut z_sq: Vec<Vec<f64>> = bn_widths.iter().map(|&w| vec![0.0; w]).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for stats in z_sum.iter_mut().chain(z_sq.iter_mut()) {
                stats.iter_mut().for_each(|v| *v = 0.0);
            }
            let mut batch_loss = 0.0f64;
            for &s in chunk {
                fill_dropout_multipliers(&m, has_dropout.then_some(&mut rng), &mut scratch.fwd);
                let loss = per_sample_pass(
                    &m,
                    data.row(s),
                    data.labels[s],
                    &mut scratch,
                    &offsets,
                    &mut grad,
                    None,
                );
                batch_loss += loss as f64;
                for (a, &g) in acc.iter_mut().zip(&grad) {
                    *a += g;
                }
                for (li, w) in bn_widths.iter().enumerate() {
                    for o in 0..*w {
                        let z = scratch.fwd.z[li][o] as f64;
                        z_sum[li][o] += z;
                        z_sq[li][o] += z * z;
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                });
            }
            let scale = cfg.learning_rate / chunk.len() as f32;
            apply_sgd_step(&mut m, &offsets, &acc, scale);
            update_running_stats(&mut m, &z_sum, &z_sq, chunk.len());
        }
    }
    Ok(m)
}

fn apply_sgd_step(
    m: &mut Model,
    offsets: &[super::autodiff::LayerOffsets],
    grad: &[f32],
    scale: f32,
) {
    for (li, layer) in m.layers.iter_mut().enumerate() {
        let off = &offsets[li];
        match &layer.mask {
            Some(mask) => {
                for (i, w) in layer.weights.iter_mut().enumerate() {
                    if mask.weights[i] {
                        *w -= scale * grad[off.weights + i];
                    }
                }
                for (i, b) in layer.bias.iter_mut().enumerate() {
                    if mask.bias[i] {
                        *b -= scale * grad[off.bias + i];
                    }
                }
            }
            None => {
                for (i, w) in layer.weights.iter_mut().enumerate() {
                    *w -= scale * grad[off.weights + i];
                }
                for (i, b) in layer.bias.iter_mut().enumerate() {
                    *b -= scale * grad[off.bias + i];
                }
            }
        }
        if let Some(bn) = &mut layer.batchnorm {
            for (i, g) in bn.gamma.iter_mut().enumerate() {
                *g -= scale * grad[off.gamma + i];
            }
            for (i, b) in bn.beta.iter_mut().enumerate() {
                *b -= scale * grad[off.beta + i];
            }
        }
    }
}

fn update_running_stats(m: &mut Model, z_sum: &[Vec<f64>], z_sq: &[Vec<f64>], batch_len: usize) {
    let n = batch_len as f64;
    for (li, layer) in m.layers.iter_mut().enumerate() {
        if let Some(bn) = &mut layer.batchnorm {
            for o in 0..layer.out_dim {
                let mean = z_sum[li][o] / n;
                let var = (z_sq[li][o] / n - mean * mean).max(0.0);
                bn.running_mean[o] =
                    (1.0 - BN_MOMENTUM) * bn.running_mean[o] + BN_MOMENTUM * mean as f32;
                bn.running_var[o] =
                    (1.0 - BN_MOMENTUM) * bn.running_var[o] + BN_MOMENTUM * var as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::activation::Activation;
    use crate::nn::forward::{forward, Mode};
    use crate::nn::model::{init_random, LayerMask, LayerSpec, ModelSpec};
    use crate::scalar::Precision;
    use rand::Rng;

    fn tiny_spec(batchnorm: bool) -> ModelSpec {
        ModelSpec {
            input_dim: 2,
            hidden: vec![LayerSpec {
                width: 8,
                activation: Activation::Elu,
                batchnorm,
                dropout: 0.0,
            }],
            output_width: 1,
        }
    }

    #[test]
    fn zero_epochs_is_a_bitwise_noop() {
        let m = init_random(&tiny_spec(true), 1).unwrap();
        let feats = vec![0.1f32, 0.2, -0.3, 0.4];
        let labels = vec![0u8, 1];
        let data = Batch::new(&feats, &labels, 2, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train(&m, &data, &cfg).unwrap();
        assert_eq!(m, out);
    }

    #[test]
    fn masked_entries_stay_zero_through_training() {
        let mut m = init_random(&tiny_spec(false), 2).unwrap();
        let mut mask = LayerMask::all_kept(8, 2);
        for i in (0..16).step_by(3) {
            mask.weights[i] = false;
        }
        mask.bias[1] = false;
        m.layers[0].mask = Some(mask);
        m.apply_masks();

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 64;
        let feats: Vec<f32> = (0..n * 2).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
        let labels: Vec<u8> = (0..n).map(|i| (feats[2 * i] > 0.0) as u8).collect();
        let data = Batch::new(&feats, &labels, n, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 16,
            learning_rate: 0.05,
            seed: 4,
        };
        let out = train(&m, &data, &cfg).unwrap();
        let mask = out.layers[0].mask.as_ref().unwrap();
        for (i, &keep) in mask.weights.iter().enumerate() {
            if !keep {
                assert_eq!(out.layers[0].weights[i], 0.0);
            }
        }
        assert_eq!(out.layers[0].bias[1], 0.0);
        // and unmasked ones moved
        assert_ne!(out.layers[0].weights[1], m.layers[0].weights[1]);
    }

    #[test]
    fn separable_data_reaches_high_accuracy() {
        // y = 1 iff x0 + x1 > 0, with a comfortable margin.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 400;
        let mut feats = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let x0: f32 = rng.gen_range(-1.0..1.0);
            let x1: f32 = rng.gen_range(-1.0..1.0);
            if (x0 + x1).abs() < 0.2 {
                continue;
            }
            feats.push(x0);
            feats.push(x1);
            labels.push(u8::from(x0 + x1 > 0.0));
        }
        let n = labels.len();
        let data = Batch::new(&feats, &labels, n, 2).unwrap();
        let m = init_random(&tiny_spec(false), 11).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.5,
            seed: 12,
        };
        let trained = train(&m, &data, &cfg).unwrap();
        let scores = forward(&trained, &feats, n, 2, Mode::Eval, 0, Precision::F32).unwrap();
        let correct = scores
            .iter()
            .zip(&labels)
            .filter(|(&s, &y)| (s >= 0.5) == (y == 1))
            .count();
        assert!(
            correct as f64 / n as f64 >= 0.95,
            "accuracy {}",
            correct as f64 / n as f64
        );
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let m = init_random(&tiny_spec(true), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 32;
        let feats: Vec<f32> = (0..n * 2).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let data = Batch::new(&feats, &labels, n, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 0.1,
            seed: 7,
        };
        let a = train(&m, &data, &cfg).unwrap();
        let b = train(&m, &data, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
