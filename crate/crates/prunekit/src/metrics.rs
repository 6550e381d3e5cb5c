//! Evaluation statistics: ROC AUC, TPR at a fixed FPR, Pearson correlation,
//! and the mean/SD "V"-shape diagnostics over a damage report.

use crate::damage::DamageReport;
use crate::error::{Error, Result};
use crate::nn::model::{Batch, Model};
use crate::nn::{loss, scores};
use crate::scalar::Precision;

/// One evaluation of a model on a labelled set.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub auc: f64,
    pub tpr_at_fpr: f64,
    pub target_fpr: f64,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub n: usize,
}

/// Area under the ROC curve: `P(score_pos > score_neg) + 0.5 P(tie)`,
/// computed with a single sort and midranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_binary(scores, labels)?;
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0f64;
    let mut n_pos = 0usize;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            if labels[idx[k]] == 1 {
                rank_sum_pos += midrank;
                n_pos += 1;
            }
        }
        i = j + 1;
    }
    let n_neg = n - n_pos;
    Ok((rank_sum_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64))
}

/// TPR at the most permissive threshold (predict positive at `score >= t`)
/// whose empirical FPR stays at or below `target_fpr`. Conservative: no
/// interpolation between attainable operating points.
pub fn tpr_at_fpr(scores: &[f64], labels: &[u8], target_fpr: f64) -> Result<f64> {
    check_binary(scores, labels)?;
    if !(0.0..1.0).contains(&target_fpr) || target_fpr <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "target_fpr {target_fpr} outside (0, 1)"
        )));
    }
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    // descending scores
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = n - n_pos;
    let allowed_fp = (target_fpr * n_neg as f64).floor() as usize;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut best_tpr = 0.0f64;
    let mut i = 0;
    while i < n {
        // admit the whole tie group at this threshold
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for k in i..=j {
            if labels[idx[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        if fp <= allowed_fp {
            best_tpr = tp as f64 / n_pos as f64;
        } else {
            break;
        }
        i = j + 1;
    }
    Ok(best_tpr)
}

fn check_binary(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Mismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::InvalidArgument(
            "both classes must be present".into(),
        ));
    }
    Ok(())
}

/// Standard Pearson coefficient. Zero-variance input is degenerate and
/// yields 0 rather than an error so sweeps never abort mid-run.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Mismatch(format!(
            "{} vs {} values",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::InvalidArgument(
            "pearson needs at least 3 points".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Correlation structure of per-parameter damage mean/SD pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct VShapeStats {
    /// Pearson corr(mean, SD).
    pub corr_raw: f64,
    /// Pearson corr(|mean|, SD).
    pub corr_abs: f64,
    pub n_params: usize,
    /// Fraction of parameters whose mean damage term is >= 0.
    pub fraction_nonneg_mean: f64,
    /// True when either column had zero variance; the correlations are then
    /// reported as 0.
    pub degenerate: bool,
}

/// Mean-vs-SD diagnostics over a report that carries the per-parameter
/// curvature statistics (the OBD family).
pub fn v_shape_stats(report: &DamageReport) -> Result<VShapeStats> {
    let mut means = Vec::with_capacity(report.entries.len());
    let mut sds = Vec::with_capacity(report.entries.len());
    for e in &report.entries {
        match (e.mean_h_theta, e.sd_h_theta) {
            (Some(m), Some(s)) => {
                means.push(m);
                sds.push(s);
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "report does not carry mean/sd curvature statistics".into(),
                ))
            }
        }
    }
    if means.len() < 3 {
        return Err(Error::InvalidArgument(
            "v-shape stats need at least 3 parameters".into(),
        ));
    }
    let abs_means: Vec<f64> = means.iter().map(|m| m.abs()).collect();
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
    };
    let degenerate = var(&means) == 0.0 || var(&sds) == 0.0 || var(&abs_means) == 0.0;
    let corr_raw = pearson(&means, &sds)?;
    let corr_abs = pearson(&abs_means, &sds)?;
    let nonneg = means.iter().filter(|&&m| m >= 0.0).count();
    Ok(VShapeStats {
        corr_raw,
        corr_abs,
        n_params: means.len(),
        fraction_nonneg_mean: nonneg as f64 / means.len() as f64,
        degenerate,
    })
}

/// Scores a model on a batch and assembles the full record. Accuracy uses
/// the 0.5 threshold.
pub fn evaluate(
    model: &Model,
    batch: &Batch<'_>,
    target_fpr: f64,
    precision: Precision,
) -> Result<MetricsRecord> {
    let s = scores(model, batch, precision)?;
    let per_loss = loss(&s, batch.labels)?;
    let auc = roc_auc(&s, batch.labels)?;
    let tpr = tpr_at_fpr(&s, batch.labels, target_fpr)?;
    let correct = s
        .iter()
        .zip(batch.labels)
        .filter(|(&p, &y)| (p >= 0.5) == (y == 1))
        .count();
    Ok(MetricsRecord {
        auc,
        tpr_at_fpr: tpr,
        target_fpr,
        mean_loss: per_loss.iter().sum::<f64>() / per_loss.len() as f64,
        accuracy: correct as f64 / batch.n as f64,
        n: batch.n,
    })
}
