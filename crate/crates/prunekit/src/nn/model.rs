//! Model structure: spec, dense layers, batch-norm state, pruning masks,
//! and the flat parameter indexing used by the derivative and damage code.
//!
//! A model is a stack of dense layers. Every hidden layer computes
//! `dropout(act(batchnorm(W x + b)))` (batch-norm and dropout optional); the
//! output layer computes a raw logit `W x + b` and the sigmoid is applied by
//! the scoring/loss code. Masked parameters hold the value 0.0 at all times,
//! so the evaluation kernels never have to consult the mask.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::activation::Activation;
use crate::error::{Error, Result};

/// Numerical floor added to the batch-norm variance before the square root.
pub const BN_EPS: f32 = 1e-5;

/// Hidden layer description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
    #[serde(default)]
    pub batchnorm: bool,
    /// Dropout rate in [0, 1); applied only in train mode.
    #[serde(default)]
    pub dropout: f32,
}

/// Architecture description. The output activation is always the sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<LayerSpec>,
    pub output_width: usize,
}

impl ModelSpec {
    /// Default experiment architecture: five ELU hidden layers with
    /// batch-norm, widths 1024/768/512/512/512 scaled by `scale`.
    pub fn scaled_default(input_dim: usize, scale: f64) -> Result<ModelSpec> {
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "scale must be in (0, 1], got {scale}"
            )));
        }
        let widths = [1024usize, 768, 512, 512, 512];
        let hidden = widths
            .iter()
            .map(|&w| LayerSpec {
                width: ((w as f64 * scale).round() as usize).max(1),
                activation: Activation::Elu,
                batchnorm: true,
                dropout: 0.0,
            })
            .collect();
        let spec = ModelSpec {
            input_dim,
            hidden,
            output_width: 1,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Desk-scale default: the full-width stack scaled to 1/8
    /// (128, 96, 64, 64, 64).
    pub fn desk_default(input_dim: usize) -> ModelSpec {
        ModelSpec::scaled_default(input_dim, 0.125).expect("desk default is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be >= 1".into()));
        }
        for (i, l) in self.hidden.iter().enumerate() {
            if l.width == 0 {
                return Err(Error::InvalidSpec(format!("hidden layer {i} has width 0")));
            }
            if !(0.0..1.0).contains(&l.dropout) {
                return Err(Error::InvalidSpec(format!(
                    "hidden layer {i} dropout {} outside [0, 1)",
                    l.dropout
                )));
            }
        }
        if self.output_width != 1 {
            // Scores, losses and labels are scalar per sample; a wider output
            // head has no defined semantics in this toolkit.
            return Err(Error::InvalidSpec(format!(
                "output_width must be 1, got {}",
                self.output_width
            )));
        }
        Ok(())
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.hidden.iter().map(|l| l.width).collect()
    }
}

/// Per-layer batch normalization state. Normalization always uses the
/// running statistics; train mode only updates them.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BatchNorm {
    pub fn identity(width: usize) -> BatchNorm {
        BatchNorm {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }
}

/// Binary keep-mask over a layer's weights and biases. `false` means pruned;
/// the corresponding value is pinned to exactly 0.0.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMask {
    /// Row-major, same shape as the weight matrix.
    pub weights: Vec<bool>,
    pub bias: Vec<bool>,
}

impl LayerMask {
    pub fn all_kept(out_dim: usize, in_dim: usize) -> LayerMask {
        LayerMask {
            weights: vec![true; out_dim * in_dim],
            bias: vec![true; out_dim],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major (out_dim x in_dim).
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub batchnorm: Option<BatchNorm>,
    pub mask: Option<LayerMask>,
    pub activation: Activation,
    pub dropout: f32,
}

impl DenseLayer {
    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> f32 {
        self.weights[row * self.in_dim + col]
    }

    /// Number of weight + bias parameters (batch-norm excluded).
    pub fn dense_param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Unmasked weight + bias parameters.
    pub fn unmasked_dense_param_count(&self) -> usize {
        match &self.mask {
            None => self.dense_param_count(),
            Some(m) => {
                m.weights.iter().filter(|&&k| k).count() + m.bias.iter().filter(|&&k| k).count()
            }
        }
    }

    /// Forces every masked entry to exactly 0.0.
    pub fn apply_mask(&mut self) {
        if let Some(m) = &self.mask {
            for (w, &keep) in self.weights.iter_mut().zip(&m.weights) {
                if !keep {
                    *w = 0.0;
                }
            }
            for (b, &keep) in self.bias.iter_mut().zip(&m.bias) {
                if !keep {
                    *b = 0.0;
                }
            }
        }
    }
}

/// A dense feed-forward model: the hidden layers of `spec` followed by a
/// single-logit output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    /// Hidden layers in order, then the output layer last.
    pub layers: Vec<DenseLayer>,
}

/// Which tensor inside a layer a flat parameter index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight { row: usize, col: usize },
    Bias { row: usize },
    Gamma { row: usize },
    Beta { row: usize },
}

/// Address of one trainable parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    pub layer: usize,
    pub kind: ParamKind,
}

impl Model {
    pub fn hidden_count(&self) -> usize {
        self.spec.hidden.len()
    }

    pub fn output_layer_index(&self) -> usize {
        self.layers.len() - 1
    }

    /// Total number of trainable parameters (weights, biases, batch-norm
    /// gamma/beta), in flat-index order: per layer, weights row-major, then
    /// bias, then gamma, then beta.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let bn = if l.batchnorm.is_some() {
                    2 * l.out_dim
                } else {
                    0
                };
                l.weights.len() + l.bias.len() + bn
            })
            .sum()
    }

    /// Weight + bias parameters of the hidden layers: the population every
    /// parameter-level damage report covers. Output layer and batch-norm
    /// parameters are not prunable.
    pub fn prunable_param_count(&self) -> usize {
        self.layers[..self.hidden_count()]
            .iter()
            .map(|l| l.dense_param_count())
            .sum()
    }

    pub fn unmasked_prunable_param_count(&self) -> usize {
        self.layers[..self.hidden_count()]
            .iter()
            .map(|l| l.unmasked_dense_param_count())
            .sum()
    }

    pub fn total_hidden_neurons(&self) -> usize {
        self.spec.hidden.iter().map(|l| l.width).sum()
    }

    pub fn param_ref_at(&self, mut flat: usize) -> Option<ParamRef> {
        for (li, l) in self.layers.iter().enumerate() {
            let nw = l.weights.len();
            if flat < nw {
                return Some(ParamRef {
                    layer: li,
                    kind: ParamKind::Weight {
                        row: flat / l.in_dim,
                        col: flat % l.in_dim,
                    },
                });
            }
            flat -= nw;
            if flat < l.out_dim {
                return Some(ParamRef {
                    layer: li,
                    kind: ParamKind::Bias { row: flat },
                });
            }
            flat -= l.out_dim;
            if l.batchnorm.is_some() {
                if flat < l.out_dim {
                    return Some(ParamRef {
                        layer: li,
                        kind: ParamKind::Gamma { row: flat },
                    });
                }
                flat -= l.out_dim;
                if flat < l.out_dim {
                    return Some(ParamRef {
                        layer: li,
                        kind: ParamKind::Beta { row: flat },
                    });
                }
                flat -= l.out_dim;
            }
        }
        None
    }

    pub fn get_param(&self, r: ParamRef) -> f32 {
        let l = &self.layers[r.layer];
        match r.kind {
            ParamKind::Weight { row, col } => l.weights[row * l.in_dim + col],
            ParamKind::Bias { row } => l.bias[row],
            ParamKind::Gamma { row } => l.batchnorm.as_ref().unwrap().gamma[row],
            ParamKind::Beta { row } => l.batchnorm.as_ref().unwrap().beta[row],
        }
    }

    pub fn set_param(&mut self, r: ParamRef, v: f32) {
        let l = &mut self.layers[r.layer];
        match r.kind {
            ParamKind::Weight { row, col } => l.weights[row * l.in_dim + col] = v,
            ParamKind::Bias { row } => l.bias[row] = v,
            ParamKind::Gamma { row } => l.batchnorm.as_mut().unwrap().gamma[row] = v,
            ParamKind::Beta { row } => l.batchnorm.as_mut().unwrap().beta[row] = v,
        }
    }

    /// Pins masked entries to exactly 0.0 in every layer.
    pub fn apply_masks(&mut self) {
        for l in &mut self.layers {
            l.apply_mask();
        }
    }

    /// Drops every mask, leaving the (already zeroed) values in place.
    /// The result evaluates identically to the masked model.
    pub fn without_masks(&self) -> Model {
        let mut m = self.clone();
        m.apply_masks();
        for l in &mut m.layers {
            l.mask = None;
        }
        m
    }

    /// Verifies that weight matrix shapes chain from input_dim through the
    /// output width and match the spec.
    pub fn check_shapes(&self) -> Result<()> {
        if self.layers.len() != self.spec.hidden.len() + 1 {
            return Err(Error::Mismatch(format!(
                "{} layers for {} hidden specs",
                self.layers.len(),
                self.spec.hidden.len()
            )));
        }
        let mut prev = self.spec.input_dim;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim != prev {
                return Err(Error::Mismatch(format!(
                    "layer {i} in_dim {} != expected {prev}",
                    l.in_dim
                )));
            }
            if l.weights.len() != l.out_dim * l.in_dim || l.bias.len() != l.out_dim {
                return Err(Error::Mismatch(format!("layer {i} buffer sizes")));
            }
            if i < self.spec.hidden.len() && l.out_dim != self.spec.hidden[i].width {
                return Err(Error::Mismatch(format!(
                    "layer {i} out_dim {} != spec width {}",
                    l.out_dim, self.spec.hidden[i].width
                )));
            }
            if let Some(bn) = &l.batchnorm {
                if bn.gamma.len() != l.out_dim
                    || bn.beta.len() != l.out_dim
                    || bn.running_mean.len() != l.out_dim
                    || bn.running_var.len() != l.out_dim
                {
                    return Err(Error::Mismatch(format!("layer {i} batch-norm sizes")));
                }
            }
            if let Some(m) = &l.mask {
                if m.weights.len() != l.weights.len() || m.bias.len() != l.bias.len() {
                    return Err(Error::Mismatch(format!("layer {i} mask sizes")));
                }
            }
            prev = l.out_dim;
        }
        if prev != self.spec.output_width {
            return Err(Error::Mismatch(format!(
                "output width {prev} != spec {}",
                self.spec.output_width
            )));
        }
        Ok(())
    }
}

/// Builds a model with Xavier/Glorot uniform weights
/// (`U(±sqrt(6/(fan_in+fan_out)))`), zero biases, identity batch-norm state,
/// and no masks. Deterministic for a fixed seed.
pub fn init_random(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(spec.hidden.len() + 1);
    let mut in_dim = spec.input_dim;
    for h in &spec.hidden {
        layers.push(random_layer(
            &mut rng,
            in_dim,
            h.width,
            h.activation,
            h.batchnorm,
            h.dropout,
        ));
        in_dim = h.width;
    }
    // Output layer: raw logit, no batch-norm, no dropout.
    layers.push(random_layer(
        &mut rng,
        in_dim,
        spec.output_width,
        Activation::Identity,
        false,
        0.0,
    ));
    Ok(Model {
        spec: spec.clone(),
        layers,
    })
}

fn random_layer(
    rng: &mut ChaCha8Rng,
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    batchnorm: bool,
    dropout: f32,
) -> DenseLayer {
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let weights = (0..out_dim * in_dim)
        .map(|_| (rng.gen_range(-limit..limit)) as f32)
        .collect();
    DenseLayer {
        in_dim,
        out_dim,
        weights,
        bias: vec![0.0; out_dim],
        batchnorm: batchnorm.then(|| BatchNorm::identity(out_dim)),
        mask: None,
        activation,
        dropout,
    }
}

/// A batch of samples: row-major features plus binary labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a [f32],
    pub labels: &'a [u8],
    pub n: usize,
    pub dim: usize,
}

impl<'a> Batch<'a> {
    pub fn new(features: &'a [f32], labels: &'a [u8], n: usize, dim: usize) -> Result<Batch<'a>> {
        if n == 0 {
            return Err(Error::InvalidArgument("batch must be nonempty".into()));
        }
        if features.len() != n * dim || labels.len() != n {
            return Err(Error::Mismatch(format!(
                "batch buffers: {} features, {} labels for n={n}, dim={dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().position(|&l| l > 1) {
            return Err(Error::InvalidArgument(format!(
                "label at row {bad} is not in {{0, 1}}"
            )));
        }
        Ok(Batch {
            features,
            labels,
            n,
            dim,
        })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &'a [f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}
