//! Damage estimation: how much the loss is expected to rise when a
//! parameter is zeroed or a neuron removed.
//!
//! Parameter-level estimators (per prunable parameter `theta` with
//! per-sample curvature `h = d2L_s/dtheta^2` and gradient `g = dL_s/dtheta`):
//!
//! - random: seeded per-layer permutation rank
//! - magnitude: `|theta|`
//! - obd: `mean_s(0.5 h theta^2)` — may be negative
//! - obd_sd: `theta^2 * SD_s(h)` — ranks identically to `Var_s(0.5 h theta^2)`
//! - lm: `mean_s(2 g^2 theta^2)` (curvature surrogate `2 g^2` in place of
//!   `h`; an unscaled `2 g^2` variant is available)
//!
//! Neuron-level scores come either from summing a parameter report over each
//! neuron's incoming weights and bias, or from a ridge regression of batch
//! loss on random neuron-drop indicators.
//!
//! Only hidden-layer weights and biases are prunable; output-layer and
//! batch-norm parameters never appear in a report.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::autodiff::{derivative_moments, layer_offsets};
use crate::nn::forward::mean_loss_with_dropped_neurons;
use crate::nn::model::{Batch, Model};
use crate::scalar::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DamageMethod {
    Random,
    Magnitude,
    Obd,
    ObdSd,
    Lm,
}

impl DamageMethod {
    pub fn name(self) -> &'static str {
        match self {
            DamageMethod::Random => "random",
            DamageMethod::Magnitude => "magnitude",
            DamageMethod::Obd => "obd",
            DamageMethod::ObdSd => "obd_sd",
            DamageMethod::Lm => "lm",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "random" => Some(DamageMethod::Random),
            "magnitude" => Some(DamageMethod::Magnitude),
            "obd" => Some(DamageMethod::Obd),
            "obd_sd" => Some(DamageMethod::ObdSd),
            "lm" => Some(DamageMethod::Lm),
            _ => None,
        }
    }

    /// Whether the estimator consumes a sample batch at all.
    pub fn needs_batch(self) -> bool {
        !matches!(self, DamageMethod::Random | DamageMethod::Magnitude)
    }
}

/// Address of a prunable parameter: a hidden layer's weight (`col = Some`)
/// or bias (`col = None`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrunableRef {
    pub layer: usize,
    pub row: usize,
    pub col: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct DamageEntry {
    pub param: PrunableRef,
    pub damage: f64,
    /// mean over samples of `h * theta^2` (no 1/2 factor), OBD family only.
    pub mean_h_theta: Option<f64>,
    /// sample SD over samples of `h * theta^2`, OBD family only.
    pub sd_h_theta: Option<f64>,
}

/// Per-parameter damage estimates in canonical order: layers ascending,
/// weights row-major, then biases.
#[derive(Debug, Clone)]
pub struct DamageReport {
    pub method: DamageMethod,
    pub entries: Vec<DamageEntry>,
    pub sample_count: usize,
    pub seed: Option<u64>,
}

/// Canonical enumeration of the prunable parameters of a model.
pub fn prunable_refs(model: &Model) -> Vec<PrunableRef> {
    let mut out = Vec::with_capacity(model.prunable_param_count());
    for li in 0..model.hidden_count() {
        let l = &model.layers[li];
        for row in 0..l.out_dim {
            for col in 0..l.in_dim {
                out.push(PrunableRef {
                    layer: li,
                    row,
                    col: Some(col),
                });
            }
        }
        for row in 0..l.out_dim {
            out.push(PrunableRef {
                layer: li,
                row,
                col: None,
            });
        }
    }
    out
}

impl DamageReport {
    /// Checks that the report covers every prunable parameter of `model`
    /// exactly once, in canonical order.
    pub fn check_covers(&self, model: &Model) -> Result<()> {
        let refs = prunable_refs(model);
        if refs.len() != self.entries.len() {
            return Err(Error::Mismatch(format!(
                "report has {} entries, model has {} prunable parameters",
                self.entries.len(),
                refs.len()
            )));
        }
        for (e, r) in self.entries.iter().zip(&refs) {
            if e.param != *r {
                return Err(Error::Mismatch(format!(
                    "report entry {:?} does not match model parameter {:?}",
                    e.param, r
                )));
            }
        }
        Ok(())
    }

    /// Columnar text form: `layer,row,col,damage,mean,sd` with `bias` in the
    /// col field for bias entries.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,row,col,damage,mean,sd\n");
        for e in &self.entries {
            let col = match e.param.col {
                Some(c) => c.to_string(),
                None => "bias".to_string(),
            };
            let mean = e.mean_h_theta.map(|v| v.to_string()).unwrap_or_default();
            let sd = e.sd_h_theta.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.param.layer, e.param.row, col, e.damage, mean, sd
            ));
        }
        s
    }
}

fn require_prunable(model: &Model) -> Result<()> {
    if model.prunable_param_count() == 0 {
        return Err(Error::InvalidArgument(
            "model has no prunable parameters".into(),
        ));
    }
    Ok(())
}

/// Seeded random ranking: damages are a per-layer permutation of
/// `0..n_layer_params`, so pruning the lowest fraction selects a uniform
/// random subset within each layer.
pub fn damage_random(model: &Model, seed: u64) -> Result<DamageReport> {
    require_prunable(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(model.prunable_param_count());
    for li in 0..model.hidden_count() {
        let l = &model.layers[li];
        let n = l.dense_param_count();
        let mut ranks: Vec<usize> = (0..n).collect();
        ranks.shuffle(&mut rng);
        let mut it = ranks.into_iter();
        for row in 0..l.out_dim {
            for col in 0..l.in_dim {
                entries.push(DamageEntry {
                    param: PrunableRef {
                        layer: li,
                        row,
                        col: Some(col),
                    },
                    damage: it.next().unwrap() as f64,
                    mean_h_theta: None,
                    sd_h_theta: None,
                });
            }
        }
        for row in 0..l.out_dim {
            entries.push(DamageEntry {
                param: PrunableRef {
                    layer: li,
                    row,
                    col: None,
                },
                damage: it.next().unwrap() as f64,
                mean_h_theta: None,
                sd_h_theta: None,
            });
        }
    }
    Ok(DamageReport {
        method: DamageMethod::Random,
        entries,
        sample_count: 0,
        seed: Some(seed),
    })
}

/// `|theta|` per parameter.
pub fn damage_magnitude(model: &Model) -> Result<DamageReport> {
    require_prunable(model)?;
    let entries = prunable_refs(model)
        .into_iter()
        .map(|r| DamageEntry {
            param: r,
            damage: (prunable_value(model, r) as f64).abs(),
            mean_h_theta: None,
            sd_h_theta: None,
        })
        .collect();
    Ok(DamageReport {
        method: DamageMethod::Magnitude,
        entries,
        sample_count: 0,
        seed: None,
    })
}

pub(crate) fn prunable_value(model: &Model, r: PrunableRef) -> f32 {
    let l = &model.layers[r.layer];
    match r.col {
        Some(c) => l.weights[r.row * l.in_dim + c],
        None => l.bias[r.row],
    }
}

/// Score of one parameter under the second-order Taylor estimate:
/// `0.5 * mean(h) * theta^2`.
pub fn obd_score(theta: f64, mean_h: f64) -> f64 {
    0.5 * mean_h * theta * theta
}

/// Score under the curvature-dispersion ranking: `theta^2 * SD(h)`.
pub fn obd_sd_score(theta: f64, sd_h: f64) -> f64 {
    theta * theta * sd_h
}

/// Score under the squared-gradient curvature surrogate:
/// `2 * mean(g^2) * theta^2`, or `2 * mean(g^2)` when `scaled` is false.
pub fn lm_score(theta: f64, mean_grad_sq: f64, scaled: bool) -> f64 {
    if scaled {
        2.0 * mean_grad_sq * theta * theta
    } else {
        2.0 * mean_grad_sq
    }
}

fn curvature_report(
    model: &Model,
    batch: &Batch<'_>,
    precision: Precision,
    method: DamageMethod,
    lm_scaled: bool,
) -> Result<DamageReport> {
    require_prunable(model)?;
    if method == DamageMethod::ObdSd && batch.n < 2 {
        return Err(Error::InvalidArgument(
            "obd_sd needs at least 2 samples to form a standard deviation".into(),
        ));
    }
    let moments = derivative_moments(model, batch, precision)?;
    let offsets = layer_offsets(model);
    let mut entries = Vec::with_capacity(model.prunable_param_count());
    for r in prunable_refs(model) {
        let l = &model.layers[r.layer];
        let off = &offsets[r.layer];
        let flat = match r.col {
            Some(c) => off.weights + r.row * l.in_dim + c,
            None => off.bias + r.row,
        };
        let theta = prunable_value(model, r) as f64;
        let t2 = theta * theta;
        let (damage, mean, sd) = match method {
            DamageMethod::Obd => (
                obd_score(theta, moments.mean_hess[flat]),
                Some(t2 * moments.mean_hess[flat]),
                Some(t2 * moments.sd_hess[flat]),
            ),
            DamageMethod::ObdSd => (
                obd_sd_score(theta, moments.sd_hess[flat]),
                Some(t2 * moments.mean_hess[flat]),
                Some(t2 * moments.sd_hess[flat]),
            ),
            DamageMethod::Lm => (
                lm_score(theta, moments.mean_grad_sq[flat], lm_scaled),
                None,
                None,
            ),
            _ => unreachable!(),
        };
        entries.push(DamageEntry {
            param: r,
            damage,
            mean_h_theta: mean,
            sd_h_theta: sd,
        });
    }
    Ok(DamageReport {
        method,
        entries,
        sample_count: batch.n,
        seed: None,
    })
}

/// Second-order Taylor damage estimate per parameter, with the
/// mean/SD curvature statistics recorded for diagnostics.
pub fn damage_obd(model: &Model, batch: &Batch<'_>, precision: Precision) -> Result<DamageReport> {
    curvature_report(model, batch, precision, DamageMethod::Obd, true)
}

/// Curvature-dispersion damage estimate per parameter.
pub fn damage_obd_sd(
    model: &Model,
    batch: &Batch<'_>,
    precision: Precision,
) -> Result<DamageReport> {
    curvature_report(model, batch, precision, DamageMethod::ObdSd, true)
}

/// Squared-gradient surrogate damage estimate per parameter. `scaled`
/// selects whether the surrogate is multiplied by `theta^2` (the default
/// reading) or used bare.
pub fn damage_lm(
    model: &Model,
    batch: &Batch<'_>,
    precision: Precision,
    scaled: bool,
) -> Result<DamageReport> {
    curvature_report(model, batch, precision, DamageMethod::Lm, scaled)
}

/// Computes the report for any parameter-level method.
pub fn damage_by_method(
    model: &Model,
    method: DamageMethod,
    batch: Option<&Batch<'_>>,
    seed: u64,
    precision: Precision,
) -> Result<DamageReport> {
    match method {
        DamageMethod::Random => damage_random(model, seed),
        DamageMethod::Magnitude => damage_magnitude(model),
        _ => {
            let batch = batch.ok_or_else(|| {
                Error::InvalidArgument(format!("method {} needs a batch", method.name()))
            })?;
            match method {
                DamageMethod::Obd => damage_obd(model, batch, precision),
                DamageMethod::ObdSd => damage_obd_sd(model, batch, precision),
                DamageMethod::Lm => damage_lm(model, batch, precision, true),
                _ => unreachable!(),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeuronDamageSource {
    ParameterAggregation,
    DropoutRegression,
}

#[derive(Debug, Clone)]
pub struct NeuronDamageEntry {
    pub layer: usize,
    pub neuron: usize,
    pub damage: f64,
}

/// Per-neuron damage over every hidden neuron, in (layer, neuron) order.
#[derive(Debug, Clone)]
pub struct NeuronDamageReport {
    pub entries: Vec<NeuronDamageEntry>,
    pub source: NeuronDamageSource,
}

impl NeuronDamageReport {
    pub fn check_covers(&self, model: &Model) -> Result<()> {
        let mut expect = Vec::new();
        for (li, l) in model.spec.hidden.iter().enumerate() {
            for j in 0..l.width {
                expect.push((li, j));
            }
        }
        if expect.len() != self.entries.len() {
            return Err(Error::Mismatch(format!(
                "neuron report has {} entries, model has {} hidden neurons",
                self.entries.len(),
                expect.len()
            )));
        }
        for (e, (li, j)) in self.entries.iter().zip(expect) {
            if e.layer != li || e.neuron != j {
                return Err(Error::Mismatch(format!(
                    "neuron report entry ({}, {}) out of order",
                    e.layer, e.neuron
                )));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let source = match self.source {
            NeuronDamageSource::ParameterAggregation => "parameter-aggregation",
            NeuronDamageSource::DropoutRegression => "dropout-regression",
        };
        let mut s = String::from("layer,neuron,damage,source\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{},{}\n", e.layer, e.neuron, e.damage, source));
        }
        s
    }
}

/// Sums a parameter report over each neuron's incoming weights and bias.
/// With `include_outgoing`, weights leaving the neuron into the next hidden
/// layer are added as well (the output layer is not covered by parameter
/// reports, so the last hidden layer gains no outgoing term).
pub fn aggregate_to_neurons(
    report: &DamageReport,
    model: &Model,
    include_outgoing: bool,
) -> Result<NeuronDamageReport> {
    report.check_covers(model)?;
    let widths = model.spec.hidden_widths();
    let mut sums: Vec<Vec<f64>> = widths.iter().map(|&w| vec![0.0; w]).collect();
    for e in &report.entries {
        sums[e.param.layer][e.param.row] += e.damage;
        if include_outgoing && e.param.layer > 0 {
            if let Some(col) = e.param.col {
                sums[e.param.layer - 1][col] += e.damage;
            }
        }
    }
    let mut entries = Vec::new();
    for (li, layer_sums) in sums.into_iter().enumerate() {
        for (j, damage) in layer_sums.into_iter().enumerate() {
            entries.push(NeuronDamageEntry {
                layer: li,
                neuron: j,
                damage,
            });
        }
    }
    Ok(NeuronDamageReport {
        entries,
        source: NeuronDamageSource::ParameterAggregation,
    })
}

/// Configuration for dropout-regression neuron scoring.
#[derive(Debug, Clone)]
pub struct DropoutRegressionConfig {
    /// Number of scoring rounds `d`; must be at least `neurons + 1`.
    pub rounds: usize,
    /// Probability that a neuron is dropped in a round; in (0, 1).
    pub dropout_rate: f64,
    pub ridge_lambda: f64,
    pub seed: u64,
}

impl DropoutRegressionConfig {
    /// Defaults: `d = 5 * neurons`, rate 0.2, ridge 1e-6.
    pub fn defaults_for(model: &Model, seed: u64) -> Self {
        DropoutRegressionConfig {
            rounds: 5 * model.total_hidden_neurons(),
            dropout_rate: 0.2,
            ridge_lambda: 1e-6,
            seed,
        }
    }
}

/// Estimates per-neuron damage by regressing the batch loss on Bernoulli
/// drop indicators: over `d` rounds, a random subset of hidden neurons is
/// zeroed (no rescaling), the mean loss recorded, and a ridge least-squares
/// fit `L ~ b0 + sum_j b_j dropped_j` solved; `b_j` is neuron `j`'s damage.
pub fn damage_dropout_regression(
    model: &Model,
    batch: &Batch<'_>,
    cfg: &DropoutRegressionConfig,
) -> Result<NeuronDamageReport> {
    let n_neurons = model.total_hidden_neurons();
    if cfg.rounds < n_neurons + 1 {
        return Err(Error::InvalidArgument(format!(
            "rounds {} too small: need at least neurons + 1 = {}",
            cfg.rounds,
            n_neurons + 1
        )));
    }
    if !(cfg.dropout_rate > 0.0 && cfg.dropout_rate < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "dropout_rate {} outside (0, 1)",
            cfg.dropout_rate
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut masks = Vec::with_capacity(cfg.rounds);
    let mut losses = Vec::with_capacity(cfg.rounds);
    let mut dropped = vec![false; n_neurons];
    for _ in 0..cfg.rounds {
        for d in dropped.iter_mut() {
            *d = rng.gen::<f64>() < cfg.dropout_rate;
        }
        losses.push(mean_loss_with_dropped_neurons(model, batch, &dropped)?);
        masks.push(dropped.clone());
    }
    let betas = fit_drop_regression(&masks, &losses, cfg.ridge_lambda)?;
    Ok(neuron_report_from_betas(model, &betas[1..]))
}

/// Exact-enumeration variant: every one of the `2^N` drop masks is evaluated
/// once, which makes the fitted coefficient of a neuron the loss cannot see
/// exactly zero. Limited to models with at most 20 hidden neurons.
pub fn damage_dropout_regression_exhaustive(
    model: &Model,
    batch: &Batch<'_>,
    ridge_lambda: f64,
) -> Result<NeuronDamageReport> {
    let n_neurons = model.total_hidden_neurons();
    if n_neurons > 20 {
        return Err(Error::InvalidArgument(format!(
            "exhaustive design over {n_neurons} neurons is too large"
        )));
    }
    let total = 1usize << n_neurons;
    let mut masks = Vec::with_capacity(total);
    let mut losses = Vec::with_capacity(total);
    for bits in 0..total {
        let dropped: Vec<bool> = (0..n_neurons).map(|j| bits >> j & 1 == 1).collect();
        losses.push(mean_loss_with_dropped_neurons(model, batch, &dropped)?);
        masks.push(dropped);
    }
    let betas = fit_drop_regression(&masks, &losses, ridge_lambda)?;
    Ok(neuron_report_from_betas(model, &betas[1..]))
}

fn neuron_report_from_betas(model: &Model, betas: &[f64]) -> NeuronDamageReport {
    let mut entries = Vec::with_capacity(betas.len());
    let mut k = 0;
    for (li, l) in model.spec.hidden.iter().enumerate() {
        for j in 0..l.width {
            entries.push(NeuronDamageEntry {
                layer: li,
                neuron: j,
                damage: betas[k],
            });
            k += 1;
        }
    }
    NeuronDamageReport {
        entries,
        source: NeuronDamageSource::DropoutRegression,
    }
}

/// Ridge least squares of `y` on an intercept plus the 0/1 drop indicators.
/// Returns `[intercept, beta_0, ..., beta_{N-1}]`. The ridge penalty is not
/// applied to the intercept.
pub fn fit_drop_regression(masks: &[Vec<bool>], y: &[f64], ridge_lambda: f64) -> Result<Vec<f64>> {
    if masks.len() != y.len() || masks.is_empty() {
        return Err(Error::Mismatch("design and response sizes".into()));
    }
    if ridge_lambda < 0.0 {
        return Err(Error::InvalidArgument("ridge_lambda must be >= 0".into()));
    }
    let n = masks[0].len();
    let k = n + 1;
    let mut xtx = vec![0.0f64; k * k];
    let mut xty = vec![0.0f64; k];
    let mut idx = Vec::with_capacity(n);
    for (mask, &yi) in masks.iter().zip(y) {
        if mask.len() != n {
            return Err(Error::Mismatch("ragged drop mask".into()));
        }
        idx.clear();
        idx.extend(mask.iter().enumerate().filter(|(_, &d)| d).map(|(j, _)| j + 1));
        xtx[0] += 1.0;
        xty[0] += yi;
        for &a in &idx {
            xtx[a] += 1.0; // row 0, col a
            xtx[a * k] += 1.0; // row a, col 0
            xty[a] += yi;
            for &b in &idx {
                xtx[a * k + b] += 1.0;
            }
        }
    }
    for j in 1..k {
        xtx[j * k + j] += ridge_lambda;
    }
    cholesky_solve(&mut xtx, &xty, k).map_err(|e| {
        if ridge_lambda == 0.0 {
            Error::SingularSystem(
                "drop-regression design is singular; retry with ridge_lambda > 0".into(),
            )
        } else {
            e
        }
    })
}

/// Solves `A x = b` for symmetric positive definite `A` (flat `n x n`,
/// destroyed in place).
fn cholesky_solve(a: &mut [f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for t in 0..j {
            d -= a[j * n + t] * a[j * n + t];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::SingularSystem(format!(
                "non-positive pivot at column {j}"
            )));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for t in 0..j {
                v -= a[i * n + t] * a[j * n + t];
            }
            a[i * n + j] = v / d;
        }
    }
    // forward then back substitution
    let mut x = b.to_vec();
    for i in 0..n {
        for t in 0..i {
            x[i] -= a[i * n + t] * x[t];
        }
        x[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for t in i + 1..n {
            x[i] -= a[t * n + i] * x[t];
        }
        x[i] /= a[i * n + i];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::activation::Activation;
    use crate::nn::model::{init_random, LayerSpec, ModelSpec};
    use crate::oracle;
    use rand::Rng;

    fn spec(widths: &[usize]) -> ModelSpec {
        ModelSpec {
            input_dim: 3,
            hidden: widths
                .iter()
                .map(|&w| LayerSpec {
                    width: w,
                    activation: Activation::Elu,
                    batchnorm: false,
                    dropout: 0.0,
                })
                .collect(),
            output_width: 1,
        }
    }

    fn random_batch(n: usize, dim: usize, seed: u64) -> (Vec<f32>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
        let labels = (0..n).map(|_| u8::from(rng.gen::<f32>() < 0.5)).collect();
        (feats, labels)
    }

    #[test]
    fn random_report_is_deterministic_per_seed() {
        let m = init_random(&spec(&[4, 3]), 1).unwrap();
        let a = damage_random(&m, 42).unwrap();
        let b = damage_random(&m, 42).unwrap();
        let c = damage_random(&m, 43).unwrap();
        let damages = |r: &DamageReport| r.entries.iter().map(|e| e.damage).collect::<Vec<_>>();
        assert_eq!(damages(&a), damages(&b));
        assert_ne!(damages(&a), damages(&c));
        a.check_covers(&m).unwrap();
    }

    #[test]
    fn random_ranks_are_a_per_layer_permutation() {
        let m = init_random(&spec(&[5]), 2).unwrap();
        let r = damage_random(&m, 7).unwrap();
        let mut got: Vec<f64> = r.entries.iter().map(|e| e.damage).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expect: Vec<f64> = (0..m.prunable_param_count()).map(|i| i as f64).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn magnitude_matches_abs_and_sort_oracle() {
        let mut m = init_random(&spec(&[4]), 3).unwrap();
        m.layers[0].weights[0] = 0.0;
        m.layers[0].weights[1] = -2.5;
        let r = damage_magnitude(&m).unwrap();
        assert_eq!(r.entries[0].damage, 0.0);
        assert_eq!(r.entries[1].damage, 2.5);
        // ordering equals an independent sort by |theta|
        let thetas: Vec<f64> = prunable_refs(&m)
            .iter()
            .map(|&p| (prunable_value(&m, p) as f64).abs())
            .collect();
        let mut by_report: Vec<usize> = (0..r.entries.len()).collect();
        by_report.sort_by(|&a, &b| {
            r.entries[a]
                .damage
                .partial_cmp(&r.entries[b].damage)
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut by_theta: Vec<usize> = (0..thetas.len()).collect();
        by_theta.sort_by(|&a, &b| thetas[a].partial_cmp(&thetas[b]).unwrap().then(a.cmp(&b)));
        assert_eq!(by_report, by_theta);
    }

    #[test]
    fn obd_quadratic_exactness() {
        // L(theta) = (theta - 3)^2 has constant curvature h = 2; zeroing
        // theta = 3 changes the loss by exactly L(0) - L(3) = 9.
        let damage = obd_score(3.0, 2.0);
        assert!((damage - 9.0).abs() < 1e-8);
        // gradient at theta = 5 is 4; the squared-gradient surrogate gives
        // 2 * 16 * 25 = 800
        assert!((lm_score(5.0, 16.0, true) - 800.0).abs() < 1e-12);
        // at an exact minimum every per-sample gradient vanishes
        assert_eq!(lm_score(5.0, 0.0, true), 0.0);
        assert_eq!(lm_score(5.0, 0.0, false), 0.0);
    }

    #[test]
    fn random_ranking_selects_uniformly_over_seeds() {
        // 10 prunable parameters; the bottom-10% is one parameter per seed.
        // Over 2000 seeds each parameter should land there ~200 +/- 60
        // times.
        let spec = ModelSpec {
            input_dim: 4,
            hidden: vec![LayerSpec {
                width: 2,
                activation: Activation::Elu,
                batchnorm: false,
                dropout: 0.0,
            }],
            output_width: 1,
        };
        let m = init_random(&spec, 0).unwrap();
        assert_eq!(m.prunable_param_count(), 10);
        let mut tally = [0usize; 10];
        for seed in 0..2000u64 {
            let r = damage_random(&m, seed).unwrap();
            let lowest = r
                .entries
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.damage.partial_cmp(&b.1.damage).unwrap())
                .unwrap()
                .0;
            tally[lowest] += 1;
        }
        for (i, &count) in tally.iter().enumerate() {
            assert!(
                (140..=260).contains(&count),
                "parameter {i} selected {count} times out of 2000"
            );
        }
    }

    #[test]
    fn obd_sd_closed_form() {
        // theta = 2, per-sample h in {1, 3}: SD = sqrt(2) under n-1, so
        // damage = 4 sqrt(2).
        let h = [1.0f64, 3.0];
        let mean = 2.0;
        let sd = (h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 1.0).sqrt();
        let damage = obd_sd_score(2.0, sd);
        assert!((damage - 4.0 * std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn zero_theta_forces_zero_damage() {
        let mut m = init_random(&spec(&[4]), 5).unwrap();
        m.layers[0].weights[2] = 0.0;
        let (feats, labels) = random_batch(8, 3, 6);
        let batch = Batch::new(&feats, &labels, 8, 3).unwrap();
        for report in [
            damage_obd(&m, &batch, Precision::F64).unwrap(),
            damage_obd_sd(&m, &batch, Precision::F64).unwrap(),
            damage_lm(&m, &batch, Precision::F64, true).unwrap(),
        ] {
            assert_eq!(report.entries[2].damage, 0.0);
        }
    }

    #[test]
    fn obd_sd_rejects_single_sample() {
        let m = init_random(&spec(&[4]), 5).unwrap();
        let (feats, labels) = random_batch(1, 3, 6);
        let batch = Batch::new(&feats, &labels, 1, 3).unwrap();
        assert!(damage_obd_sd(&m, &batch, Precision::F64).is_err());
    }

    #[test]
    fn identical_samples_give_zero_sd_damage() {
        let m = init_random(&spec(&[4, 3]), 8).unwrap();
        let feats = [0.5f32, -0.25, 0.75].repeat(6);
        let labels = vec![1u8; 6];
        let batch = Batch::new(&feats, &labels, 6, 3).unwrap();
        let r = damage_obd_sd(&m, &batch, Precision::F64).unwrap();
        for e in &r.entries {
            assert!(e.damage.abs() < 1e-12);
        }
    }

    #[test]
    fn nonnegativity_of_magnitude_obdsd_lm() {
        let m = init_random(&spec(&[6, 4]), 9).unwrap();
        let (feats, labels) = random_batch(16, 3, 10);
        let batch = Batch::new(&feats, &labels, 16, 3).unwrap();
        for report in [
            damage_magnitude(&m).unwrap(),
            damage_obd_sd(&m, &batch, Precision::F64).unwrap(),
            damage_lm(&m, &batch, Precision::F64, true).unwrap(),
        ] {
            assert!(report.entries.iter().all(|e| e.damage >= 0.0));
        }
    }

    #[test]
    fn obd_sd_orders_like_variance_of_half_h_theta_sq() {
        let m = init_random(&spec(&[5, 4]), 11).unwrap();
        let (feats, labels) = random_batch(12, 3, 12);
        let batch = Batch::new(&feats, &labels, 12, 3).unwrap();
        let full = crate::nn::hessian_diag(&m, &batch, Precision::F64).unwrap();
        let report = damage_obd_sd(&m, &batch, Precision::F64).unwrap();
        let offsets = layer_offsets(&m);
        // Var over samples of 0.5 h theta^2 = (theta^4 / 4) Var(h); both
        // orderings must agree with ties broken by entry index.
        let mut var_route = Vec::new();
        for (i, r) in prunable_refs(&m).iter().enumerate() {
            let l = &m.layers[r.layer];
            let flat = match r.col {
                Some(c) => offsets[r.layer].weights + r.row * l.in_dim + c,
                None => offsets[r.layer].bias + r.row,
            };
            let theta = prunable_value(&m, *r) as f64;
            let n = batch.n as f64;
            let (mut s, mut s2) = (0.0, 0.0);
            for smp in 0..batch.n {
                let v = 0.5 * full.hessian_row(smp)[flat] * theta * theta;
                s += v;
                s2 += v * v;
            }
            let var = ((s2 - s * s / n) / (n - 1.0)).max(0.0);
            var_route.push((var, i));
        }
        let mut by_var: Vec<usize> = (0..var_route.len()).collect();
        by_var.sort_by(|&a, &b| {
            var_route[a]
                .0
                .partial_cmp(&var_route[b].0)
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut by_report: Vec<usize> = (0..report.entries.len()).collect();
        by_report.sort_by(|&a, &b| {
            report.entries[a]
                .damage
                .partial_cmp(&report.entries[b].damage)
                .unwrap()
                .then(a.cmp(&b))
        });
        assert_eq!(by_var, by_report);
    }

    #[test]
    fn neuron_aggregation_sums_incoming_and_bias() {
        let m = init_random(&spec(&[2]), 13).unwrap();
        // hand-build a report: layer 0 has 2 neurons x 3 inputs + 2 biases
        let mut entries = Vec::new();
        let damages = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // weights row-major
        let mut k = 0;
        for row in 0..2 {
            for col in 0..3 {
                entries.push(DamageEntry {
                    param: PrunableRef {
                        layer: 0,
                        row,
                        col: Some(col),
                    },
                    damage: damages[k],
                    mean_h_theta: None,
                    sd_h_theta: None,
                });
                k += 1;
            }
        }
        for (row, bias_damage) in [7.0, 8.0].iter().enumerate() {
            entries.push(DamageEntry {
                param: PrunableRef {
                    layer: 0,
                    row,
                    col: None,
                },
                damage: *bias_damage,
                mean_h_theta: None,
                sd_h_theta: None,
            });
        }
        let report = DamageReport {
            method: DamageMethod::Magnitude,
            entries,
            sample_count: 0,
            seed: None,
        };
        let agg = aggregate_to_neurons(&report, &m, false).unwrap();
        assert_eq!(agg.entries[0].damage, 1.0 + 2.0 + 3.0 + 7.0);
        assert_eq!(agg.entries[1].damage, 4.0 + 5.0 + 6.0 + 8.0);
        // partition property: layer sums match
        let total: f64 = report.entries.iter().map(|e| e.damage).sum();
        let agg_total: f64 = agg.entries.iter().map(|e| e.damage).sum();
        assert!((total - agg_total).abs() < 1e-12);
    }

    #[test]
    fn linear_drop_regression_recovers_exact_coefficients() {
        // y exactly linear in the indicators: recovered beta match to 1e-8.
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let true_beta = [0.7, -0.2, 1.5, 0.05];
        let intercept = 0.4;
        let mut masks = Vec::new();
        let mut y = Vec::new();
        for _ in 0..64 {
            let mask: Vec<bool> = (0..4).map(|_| rng.gen::<f64>() < 0.4).collect();
            let mut v = intercept;
            for (j, &d) in mask.iter().enumerate() {
                if d {
                    v += true_beta[j];
                }
            }
            masks.push(mask);
            y.push(v);
        }
        let betas = fit_drop_regression(&masks, &y, 0.0).unwrap();
        assert!((betas[0] - intercept).abs() < 1e-8);
        for (b, t) in betas[1..].iter().zip(&true_beta) {
            assert!((b - t).abs() < 1e-8);
        }
    }

    #[test]
    fn singular_system_without_ridge_advises_ridge() {
        // a neuron that is never dropped makes the design singular
        let masks = vec![
            vec![true, false],
            vec![false, false],
            vec![true, false],
            vec![false, false],
        ];
        let y = vec![1.0, 0.0, 1.0, 0.0];
        match fit_drop_regression(&masks, &y, 0.0) {
            Err(Error::SingularSystem(msg)) => assert!(msg.contains("ridge")),
            other => panic!("expected singular-system error, got {other:?}"),
        }
        // with ridge it solves
        assert!(fit_drop_regression(&masks, &y, 1e-6).is_ok());
    }

    #[test]
    fn dead_neuron_gets_zero_coefficient_under_exhaustive_design() {
        let mut m = init_random(&spec(&[4]), 21).unwrap();
        // zero all outgoing weights of hidden neuron 2
        m.layers[1].weights[2] = 0.0;
        let (feats, labels) = random_batch(16, 3, 22);
        let batch = Batch::new(&feats, &labels, 16, 3).unwrap();
        let r = damage_dropout_regression_exhaustive(&m, &batch, 0.0).unwrap();
        assert!(
            r.entries[2].damage.abs() < 1e-6,
            "dead neuron beta {}",
            r.entries[2].damage
        );
    }

    #[test]
    fn reports_serialize_to_the_documented_csv_columns() {
        let m = init_random(&spec(&[3]), 50).unwrap();
        let report = damage_magnitude(&m).unwrap();
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("layer,row,col,damage,mean,sd"));
        // 3*3 weights then 3 biases; bias rows carry the literal `bias`
        assert_eq!(csv.lines().count(), 1 + 12);
        assert!(csv.lines().nth(10).unwrap().starts_with("0,0,bias,"));

        let agg = aggregate_to_neurons(&report, &m, false).unwrap();
        let ncsv = agg.to_csv();
        assert!(ncsv.starts_with("layer,neuron,damage,source\n"));
        assert_eq!(ncsv.lines().count(), 1 + 3);
        assert!(ncsv.contains("parameter-aggregation"));
    }

    #[test]
    fn dropout_regression_validates_round_count() {
        let m = init_random(&spec(&[4]), 23).unwrap();
        let (feats, labels) = random_batch(8, 3, 24);
        let batch = Batch::new(&feats, &labels, 8, 3).unwrap();
        let cfg = DropoutRegressionConfig {
            rounds: 3,
            dropout_rate: 0.3,
            ridge_lambda: 1e-6,
            seed: 1,
        };
        assert!(damage_dropout_regression(&m, &batch, &cfg).is_err());
    }

    #[test]
    fn obd_rank_correlates_with_zero_out_oracle_on_trained_toy() {
        // Train a tiny net, then check the recorded correlation direction
        // between OBD-family damages and the true zero-out loss changes.
        use crate::nn::train::{train, TrainConfig};
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let n = 256;
        let mut feats = Vec::with_capacity(n * 3);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.gen::<f32>() < 0.5;
            for d in 0..3 {
                let center = if y { 0.8 } else { -0.8 };
                let jitter: f32 = rng.gen_range(-1.0..1.0);
                feats.push(if d == 0 { center + jitter } else { jitter });
            }
            labels.push(y as u8);
        }
        let data = Batch::new(&feats, &labels, n, 3).unwrap();
        let m = init_random(&spec(&[5, 4]), 31).unwrap();
        let trained = train(
            &m,
            &data,
            &TrainConfig {
                epochs: 30,
                batch_size: 32,
                learning_rate: 0.3,
                seed: 32,
            },
        )
        .unwrap();
        let truth = oracle::zero_out_damage(&trained, &data).unwrap();
        let est = damage_obd_sd(&trained, &data, Precision::F64).unwrap();
        let est_vals: Vec<f64> = est.entries.iter().map(|e| e.damage).collect();
        let rho = oracle::spearman(&est_vals, &truth);
        assert!(rho.abs() > 0.3, "obd_sd spearman {rho}");
    }
}
