//! Per-sample first derivatives and the exact diagonal of the per-sample
//! Hessian.
//!
//! The diagonal entry for a weight `W[o,i]` of a layer with pre-activation
//! `z` is `x_i^2 * d2L/dz_o^2`, because the loss depends on that weight only
//! through `z_o`. Getting `d2L/dz_o^2` exactly requires carrying the full
//! curvature block between the units of each layer on the way down: a unit
//! influences every unit of the next layer, so its second derivative picks
//! up off-diagonal terms from there even though we only ever *report* the
//! diagonal. The backward recursion is, per layer (activation `f`, frozen
//! batch-norm scale `s`, dropout multiplier `d`):
//!
//! ```text
//!   G_u[o]   = G_a[o] * d_o * f'(u_o)
//!   H_u[o,k] = f'(u_o) f'(u_k) d_o d_k H_a[o,k] + [o==k] f''(u_o) d_o G_a[o]
//!   G_z = s .* G_u           H_z[o,k] = s_o s_k H_u[o,k]
//!   G_x = W^T G_z            H_x = W^T H_z W
//! ```
//!
//! Batch-norm running statistics are treated as constants (frozen), which is
//! exactly the state a damage estimate has to describe. The output logit is
//! seeded with the binary cross-entropy values `dL/dz = p - y` and
//! `d2L/dz^2 = p(1-p)`, both zero in the clamped score region.

use super::forward::{forward_sample, sigmoid, ForwardScratch, SCORE_CLAMP};
use super::model::{Batch, Model, BN_EPS};
use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};

/// Per-sample, per-parameter derivatives in flat parameter order
/// (see [`Model::param_ref_at`]). Rows are samples.
#[derive(Debug, Clone)]
pub struct PerSampleDerivatives {
    pub sample_count: usize,
    pub param_count: usize,
    /// `sample_count * param_count` first derivatives.
    pub gradients: Vec<f64>,
    /// `sample_count * param_count` diagonal second derivatives; empty when
    /// only the first-order pass was requested.
    pub hessian_diag: Vec<f64>,
}

impl PerSampleDerivatives {
    pub fn gradient_row(&self, sample: usize) -> &[f64] {
        &self.gradients[sample * self.param_count..(sample + 1) * self.param_count]
    }

    pub fn hessian_row(&self, sample: usize) -> &[f64] {
        &self.hessian_diag[sample * self.param_count..(sample + 1) * self.param_count]
    }

    /// Mean over samples of each parameter's first derivative.
    pub fn mean_gradient(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.param_count];
        for s in 0..self.sample_count {
            for (acc, &g) in out.iter_mut().zip(self.gradient_row(s)) {
                *acc += g;
            }
        }
        let inv = 1.0 / self.sample_count as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }
}

/// Flat offsets of each layer's parameter blocks.
pub(crate) struct LayerOffsets {
    pub weights: usize,
    pub bias: usize,
    pub gamma: usize, // == beta when the layer has no batch-norm
    pub beta: usize,
}

pub(crate) fn layer_offsets(model: &Model) -> Vec<LayerOffsets> {
    let mut out = Vec::with_capacity(model.layers.len());
    let mut off = 0usize;
    for l in &model.layers {
        let weights = off;
        let bias = weights + l.weights.len();
        let gamma = bias + l.out_dim;
        let beta = if l.batchnorm.is_some() {
            gamma + l.out_dim
        } else {
            gamma
        };
        off = if l.batchnorm.is_some() {
            beta + l.out_dim
        } else {
            gamma
        };
        out.push(LayerOffsets {
            weights,
            bias,
            gamma,
            beta,
        });
    }
    out
}

pub(crate) struct DerivScratch<S> {
    pub fwd: ForwardScratch<S>,
    g_cur: Vec<S>,
    g_next: Vec<S>,
    h_cur: Vec<S>,
    h_next: Vec<S>,
    h_tmp: Vec<S>,
    fp: Vec<S>,
    fpp: Vec<S>,
}

impl<S: Scalar> DerivScratch<S> {
    pub fn for_model(model: &Model) -> Self {
        let max_w = model
            .layers
            .iter()
            .map(|l| l.out_dim.max(l.in_dim))
            .max()
            .unwrap_or(1);
        DerivScratch {
            fwd: ForwardScratch::for_model(model),
            g_cur: vec![S::ZERO; max_w],
            g_next: vec![S::ZERO; max_w],
            h_cur: vec![S::ZERO; max_w * max_w],
            h_next: vec![S::ZERO; max_w * max_w],
            h_tmp: vec![S::ZERO; max_w * max_w],
            fp: vec![S::ZERO; max_w],
            fpp: vec![S::ZERO; max_w],
        }
    }
}

/// Runs forward + backward for one sample whose dropout multipliers are
/// already set in `scratch.fwd.drop`. Writes first derivatives into `grad`
/// and, when `hess` is given, exact diagonal second derivatives. Returns the
/// per-sample loss.
pub(crate) fn per_sample_pass<S: Scalar>(
    model: &Model,
    features: &[f32],
    label: u8,
    scratch: &mut DerivScratch<S>,
    offsets: &[LayerOffsets],
    grad: &mut [S],
    mut hess: Option<&mut [S]>,
) -> S {
    let logit = forward_sample(model, features, &mut scratch.fwd);
    let p = sigmoid(logit);
    let clamp_lo = S::from_f64(SCORE_CLAMP);
    let clamp_hi = S::from_f64(1.0 - SCORE_CLAMP);
    let in_region = p > clamp_lo && p < clamp_hi;
    let y = S::from_f32(label as f32);
    let p_clamped = if p < clamp_lo {
        clamp_lo
    } else if p > clamp_hi {
        clamp_hi
    } else {
        p
    };
    let sample_loss = if label == 1 {
        -(p_clamped.ln())
    } else {
        -((S::ONE - p_clamped).ln())
    };

    let want_h = hess.is_some();
    // Seed with dL/d(logit) and d2L/d(logit)^2; the output layer is handled
    // by the same per-layer code below with these as its activation grads.
    scratch.g_cur[0] = if in_region { p - y } else { S::ZERO };
    if want_h {
        scratch.h_cur[0] = if in_region {
            p * (S::ONE - p)
        } else {
            S::ZERO
        };
    }

    for li in (0..model.layers.len()).rev() {
        let layer = &model.layers[li];
        let m = layer.out_dim;
        let n_in = layer.in_dim;
        let off = &offsets[li];

        // Activation derivatives at the cached pre-activations.
        for o in 0..m {
            let u = scratch.fwd.u[li][o];
            scratch.fp[o] = layer.activation.d1(u);
            if want_h {
                scratch.fpp[o] = layer.activation.d2(u);
            }
        }

        // Fold dropout and activation into unit-level derivatives, then the
        // frozen batch-norm affine down to the raw pre-activation z.
        // g_cur / h_cur enter as gradients wrt this layer's outputs a.
        for o in 0..m {
            let d_o = scratch.fwd.drop[li][o];
            let g_act = scratch.g_cur[o] * d_o;
            scratch.g_cur[o] = g_act * scratch.fp[o];
            if want_h {
                for k in 0..m {
                    let d_k = scratch.fwd.drop[li][k];
                    let mut h = scratch.h_cur[o * m + k] * d_o * d_k * scratch.fp[o] * scratch.fp[k];
                    if o == k {
                        h += scratch.fpp[o] * g_act;
                    }
                    scratch.h_tmp[o * m + k] = h;
                }
            }
        }
        if want_h {
            scratch.h_cur[..m * m].copy_from_slice(&scratch.h_tmp[..m * m]);
        }

        // g_cur/h_cur now hold derivatives wrt u (post-batch-norm
        // pre-activation). Emit gamma/beta derivatives and rescale to z.
        if let Some(bn) = &layer.batchnorm {
            for o in 0..m {
                let zh = scratch.fwd.zhat[li][o];
                let gu = scratch.g_cur[o];
                grad[off.gamma + o] = gu * zh;
                grad[off.beta + o] = gu;
                if let Some(h) = hess.as_deref_mut() {
                    let huu = scratch.h_cur[o * m + o];
                    h[off.gamma + o] = huu * zh * zh;
                    h[off.beta + o] = huu;
                }
            }
            for o in 0..m {
                let s_o = S::from_f32(bn.gamma[o])
                    / (S::from_f32(bn.running_var[o]) + S::from_f32(BN_EPS)).sqrt();
                scratch.g_cur[o] = scratch.g_cur[o] * s_o;
                if want_h {
                    for k in 0..m {
                        let s_k = S::from_f32(bn.gamma[k])
                            / (S::from_f32(bn.running_var[k]) + S::from_f32(BN_EPS)).sqrt();
                        scratch.h_cur[o * m + k] = scratch.h_cur[o * m + k] * s_o * s_k;
                    }
                }
            }
        }

        // Weight and bias derivatives from the z-level values.
        let x = &scratch.fwd.acts[li];
        for o in 0..m {
            let gz = scratch.g_cur[o];
            grad[off.bias + o] = gz;
            let wrow = off.weights + o * n_in;
            for i in 0..n_in {
                grad[wrow + i] = gz * x[i];
            }
            if let Some(h) = hess.as_deref_mut() {
                let hz = scratch.h_cur[o * m + o];
                h[off.bias + o] = hz;
                for i in 0..n_in {
                    h[wrow + i] = hz * x[i] * x[i];
                }
            }
        }

        // Propagate to the previous layer's activations.
        if li > 0 {
            for v in scratch.g_next[..n_in].iter_mut() {
                *v = S::ZERO;
            }
            for o in 0..m {
                let gz = scratch.g_cur[o];
                let wrow = &layer.weights[o * n_in..(o + 1) * n_in];
                for (gx, &w) in scratch.g_next[..n_in].iter_mut().zip(wrow) {
                    *gx += S::from_f32(w) * gz;
                }
            }
            std::mem::swap(&mut scratch.g_cur, &mut scratch.g_next);

            if want_h {
                // h_tmp = H_z W  (m x n_in), then h_next = W^T h_tmp.
                for v in scratch.h_tmp[..m * n_in].iter_mut() {
                    *v = S::ZERO;
                }
                for o in 0..m {
                    for k in 0..m {
                        let hv = scratch.h_cur[o * m + k];
                        if hv == S::ZERO {
                            continue;
                        }
                        let wrow = &layer.weights[k * n_in..(k + 1) * n_in];
                        let brow = &mut scratch.h_tmp[o * n_in..(o + 1) * n_in];
                        for (b, &w) in brow.iter_mut().zip(wrow) {
                            *b += S::from_f32(w) * hv;
                        }
                    }
                }
                for v in scratch.h_next[..n_in * n_in].iter_mut() {
                    *v = S::ZERO;
                }
                for o in 0..m {
                    let wrow = &layer.weights[o * n_in..(o + 1) * n_in];
                    let brow = &scratch.h_tmp[o * n_in..(o + 1) * n_in];
                    for i in 0..n_in {
                        let w = S::from_f32(wrow[i]);
                        if w == S::ZERO {
                            continue;
                        }
                        let hrow = &mut scratch.h_next[i * n_in..(i + 1) * n_in];
                        for (hx, &b) in hrow.iter_mut().zip(brow) {
                            *hx += w * b;
                        }
                    }
                }
                std::mem::swap(&mut scratch.h_cur, &mut scratch.h_next);
            }
        }
    }
    sample_loss
}

fn check_finite(model: &Model, row: &[f64], what: &str) -> Result<()> {
    if let Some(i) = row.iter().position(|v| !v.is_finite()) {
        let r = model.param_ref_at(i);
        return Err(Error::NonFinite(format!(
            "{what} for parameter {i} ({r:?})"
        )));
    }
    Ok(())
}

fn derivatives_impl<S: Scalar>(
    model: &Model,
    batch: &Batch<'_>,
    want_hessian: bool,
) -> Result<PerSampleDerivatives> {
    if batch.dim != model.spec.input_dim {
        return Err(Error::Mismatch(format!(
            "feature width {} != model input_dim {}",
            batch.dim, model.spec.input_dim
        )));
    }
    let p = model.param_count();
    let offsets = layer_offsets(model);
    let mut scratch = DerivScratch::<S>::for_model(model);
    let mut grad_buf = vec![S::ZERO; p];
    let mut hess_buf = vec![S::ZERO; p];
    let mut gradients = Vec::with_capacity(batch.n * p);
    let mut hessian = Vec::with_capacity(if want_hessian { batch.n * p } else { 0 });
    for s in 0..batch.n {
        per_sample_pass(
            model,
            batch.row(s),
            batch.labels[s],
            &mut scratch,
            &offsets,
            &mut grad_buf,
            want_hessian.then_some(&mut hess_buf[..]),
        );
        gradients.extend(grad_buf.iter().map(|v| v.to_f64()));
        check_finite(model, &gradients[s * p..(s + 1) * p], "gradient")?;
        if want_hessian {
            hessian.extend(hess_buf.iter().map(|v| v.to_f64()));
            check_finite(model, &hessian[s * p..(s + 1) * p], "hessian diagonal")?;
        }
    }
    Ok(PerSampleDerivatives {
        sample_count: batch.n,
        param_count: p,
        gradients,
        hessian_diag: hessian,
    })
}

/// Per-sample first derivatives of the loss, eval mode.
pub fn backward(model: &Model, batch: &Batch<'_>, precision: Precision) -> Result<PerSampleDerivatives> {
    match precision {
        Precision::F32 => derivatives_impl::<f32>(model, batch, false),
        Precision::F64 => derivatives_impl::<f64>(model, batch, false),
    }
}

/// Per-sample first derivatives plus the exact per-sample Hessian diagonal,
/// eval mode with frozen batch-norm.
pub fn hessian_diag(
    model: &Model,
    batch: &Batch<'_>,
    precision: Precision,
) -> Result<PerSampleDerivatives> {
    match precision {
        Precision::F32 => derivatives_impl::<f32>(model, batch, true),
        Precision::F64 => derivatives_impl::<f64>(model, batch, true),
    }
}

/// Streaming per-parameter moments of the per-sample derivatives; this is
/// what the damage estimators consume, so a large damage batch never
/// materializes an `n x P` matrix.
#[derive(Debug, Clone)]
pub struct DerivativeMoments {
    pub sample_count: usize,
    /// mean over samples of (dL_s/dtheta)^2
    pub mean_grad_sq: Vec<f64>,
    /// mean over samples of d2L_s/dtheta^2
    pub mean_hess: Vec<f64>,
    /// sample standard deviation (n-1 denominator) of d2L_s/dtheta^2;
    /// all zeros when the batch has a single sample
    pub sd_hess: Vec<f64>,
}

pub fn derivative_moments(
    model: &Model,
    batch: &Batch<'_>,
    precision: Precision,
) -> Result<DerivativeMoments> {
    match precision {
        Precision::F32 => moments_impl::<f32>(model, batch),
        Precision::F64 => moments_impl::<f64>(model, batch),
    }
}

fn moments_impl<S: Scalar>(model: &Model, batch: &Batch<'_>) -> Result<DerivativeMoments> {
    if batch.dim != model.spec.input_dim {
        return Err(Error::Mismatch(format!(
            "feature width {} != model input_dim {}",
            batch.dim, model.spec.input_dim
        )));
    }
    let p = model.param_count();
    let offsets = layer_offsets(model);
    let mut scratch = DerivScratch::<S>::for_model(model);
    let mut grad_buf = vec![S::ZERO; p];
    let mut hess_buf = vec![S::ZERO; p];
    let mut sum_g2 = vec![0.0f64; p];
    // Welford accumulation for h: exact zeros for constant sequences.
    let mut mean_h = vec![0.0f64; p];
    let mut m2_h = vec![0.0f64; p];
    for s in 0..batch.n {
        per_sample_pass(
            model,
            batch.row(s),
            batch.labels[s],
            &mut scratch,
            &offsets,
            &mut grad_buf,
            Some(&mut hess_buf[..]),
        );
        let inv_count = 1.0 / (s + 1) as f64;
        for i in 0..p {
            let g = grad_buf[i].to_f64();
            let h = hess_buf[i].to_f64();
            if !g.is_finite() || !h.is_finite() {
                let r = model.param_ref_at(i);
                return Err(Error::NonFinite(format!(
                    "derivative for parameter {i} ({r:?}) at sample {s}"
                )));
            }
            sum_g2[i] += g * g;
            let delta = h - mean_h[i];
            mean_h[i] += delta * inv_count;
            m2_h[i] += delta * (h - mean_h[i]);
        }
    }
    let n = batch.n as f64;
    let mean_grad_sq = sum_g2.iter().map(|v| v / n).collect();
    let sd_hess = if batch.n < 2 {
        vec![0.0; p]
    } else {
        m2_h.iter().map(|&v| (v.max(0.0) / (n - 1.0)).sqrt()).collect()
    };
    Ok(DerivativeMoments {
        sample_count: batch.n,
        mean_grad_sq,
        mean_hess: mean_h,
        sd_hess,
    })
}

/// Gradient of the mean batch loss, eval mode: the reduction the training
/// step uses, exposed so the per-sample/mean consistency property can be
/// checked directly.
pub fn batch_mean_gradient(
    model: &Model,
    batch: &Batch<'_>,
    precision: Precision,
) -> Result<Vec<f64>> {
    fn run<S: Scalar>(model: &Model, batch: &Batch<'_>) -> Result<Vec<f64>> {
        let p = model.param_count();
        let offsets = layer_offsets(model);
        let mut scratch = DerivScratch::<S>::for_model(model);
        let mut grad_buf = vec![S::ZERO; p];
        let mut acc = vec![S::ZERO; p];
        for s in 0..batch.n {
            per_sample_pass(
                model,
                batch.row(s),
                batch.labels[s],
                &mut scratch,
                &offsets,
                &mut grad_buf,
                None,
            );
            for (a, &g) in acc.iter_mut().zip(&grad_buf) {
                *a += g;
            }
        }
        let inv = S::ONE / S::from_f64(batch.n as f64);
        Ok(acc.iter().map(|&v| (v * inv).to_f64()).collect())
    }
    if batch.dim != model.spec.input_dim {
        return Err(Error::Mismatch("feature width".into()));
    }
    match precision {
        Precision::F32 => run::<f32>(model, batch),
        Precision::F64 => run::<f64>(model, batch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::activation::Activation;
    use crate::nn::model::{LayerSpec, ModelSpec};
    use crate::oracle;

    fn mixed_spec() -> ModelSpec {
        ModelSpec {
            input_dim: 4,
            hidden: vec![
                LayerSpec {
                    width: 6,
                    activation: Activation::Elu,
                    batchnorm: true,
                    dropout: 0.0,
                },
                LayerSpec {
                    width: 5,
                    activation: Activation::Relu,
                    batchnorm: false,
                    dropout: 0.0,
                },
                LayerSpec {
                    width: 3,
                    activation: Activation::Identity,
                    batchnorm: true,
                    dropout: 0.0,
                },
            ],
            output_width: 1,
        }
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let (model, feats, labels) = oracle::safe_random_instance(&mixed_spec(), 42, 6);
        let batch = Batch::new(&feats, &labels, labels.len(), 4).unwrap();
        let derivs = backward(&model, &batch, Precision::F64).unwrap();
        let mean = derivs.mean_gradient();
        let max_rel = oracle::max_gradient_fd_error(&model, &batch, &mean, 1e-4);
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn hessian_diag_matches_finite_difference_of_gradients() {
        let (model, feats, labels) = oracle::safe_random_instance(&mixed_spec(), 7, 5);
        let batch = Batch::new(&feats, &labels, labels.len(), 4).unwrap();
        let derivs = hessian_diag(&model, &batch, Precision::F64).unwrap();
        let mut mean_h = vec![0.0; derivs.param_count];
        for s in 0..derivs.sample_count {
            for (a, &h) in mean_h.iter_mut().zip(derivs.hessian_row(s)) {
                *a += h;
            }
        }
        mean_h.iter_mut().for_each(|v| *v /= derivs.sample_count as f64);
        let max_rel = oracle::max_hessian_fd_error(&model, &batch, &mean_h, 1e-4);
        assert!(max_rel < 1e-3, "max relative error {max_rel}");
    }

    #[test]
    fn hessian_diag_matches_second_difference_of_loss() {
        let (model, feats, labels) = oracle::safe_random_instance(&mixed_spec(), 17, 5);
        let batch = Batch::new(&feats, &labels, labels.len(), 4).unwrap();
        let derivs = hessian_diag(&model, &batch, Precision::F64).unwrap();
        let mut mean_h = vec![0.0; derivs.param_count];
        for s in 0..derivs.sample_count {
            for (a, &h) in mean_h.iter_mut().zip(derivs.hessian_row(s)) {
                *a += h;
            }
        }
        mean_h.iter_mut().for_each(|v| *v /= derivs.sample_count as f64);
        let fd = oracle::fd_hessian_diag_from_loss(&model, &batch, 1e-3);
        let max_rel = fd
            .iter()
            .zip(&mean_h)
            .map(|(&n, &a)| oracle::relative_error(a, n, 1e-3))
            .fold(0.0, f64::max);
        assert!(max_rel < 1e-3, "max relative error {max_rel}");
    }

    #[test]
    fn per_sample_mean_equals_batch_gradient() {
        let (model, feats, labels) = oracle::safe_random_instance(&mixed_spec(), 3, 8);
        let batch = Batch::new(&feats, &labels, labels.len(), 4).unwrap();
        let per = backward(&model, &batch, Precision::F64).unwrap().mean_gradient();
        let whole = batch_mean_gradient(&model, &batch, Precision::F64).unwrap();
        for (a, b) in per.iter().zip(&whole) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn moments_agree_with_full_per_sample_matrix() {
        let (model, feats, labels) = oracle::safe_random_instance(&mixed_spec(), 9, 7);
        let batch = Batch::new(&feats, &labels, labels.len(), 4).unwrap();
        let full = hessian_diag(&model, &batch, Precision::F64).unwrap();
        let m = derivative_moments(&model, &batch, Precision::F64).unwrap();
        let n = batch.n as f64;
        for i in 0..full.param_count {
            let mut sh = 0.0;
            let mut sh2 = 0.0;
            let mut sg2 = 0.0;
            for s in 0..batch.n {
                let h = full.hessian_row(s)[i];
                let g = full.gradient_row(s)[i];
                sh += h;
                sh2 += h * h;
                sg2 += g * g;
            }
            assert!((m.mean_hess[i] - sh / n).abs() < 1e-12);
            assert!((m.mean_grad_sq[i] - sg2 / n).abs() < 1e-12);
            let var = ((sh2 - sh * sh / n) / (n - 1.0)).max(0.0);
            assert!((m.sd_hess[i] - var.sqrt()).abs() < 1e-10);
        }
    }
}
