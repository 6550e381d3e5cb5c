//! Applying damage reports: parameter masking, structural neuron removal,
//! nearest-pair neuron merging, the iterative prune/fine-tune loop, and
//! derivation of reduced architectures for from-scratch retraining.
//!
//! Only hidden layers are ever pruned; the output layer is untouched.
//! Parameter-level pruning masks `floor(p * remaining)` parameters per
//! round (equivalently `ceil((1-p) * remaining)` survive); neuron-level
//! pruning removes `ceil(p * width)` whole neurons per round. Ties break on
//! ascending (layer, row, col) / neuron index everywhere.

use crate::compress::{measure_sizes, SizeReport, StoragePrecision};
use crate::damage::{
    aggregate_to_neurons, damage_by_method, damage_dropout_regression, DamageMethod, DamageReport,
    DropoutRegressionConfig, NeuronDamageReport,
};
use crate::data::{resample, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, v_shape_stats, MetricsRecord, VShapeStats};
use crate::nn::model::{LayerMask, Model, ModelSpec};
use crate::nn::train::{train, TrainConfig};
use crate::nn::{init_random, Mode};
use crate::scalar::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneLevel {
    Parameter,
    Neuron,
}

impl PruneLevel {
    pub fn name(self) -> &'static str {
        match self {
            PruneLevel::Parameter => "parameter",
            PruneLevel::Neuron => "neuron",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "parameter" => Some(PruneLevel::Parameter),
            "neuron" => Some(PruneLevel::Neuron),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneScope {
    PerLayer,
    Global,
}

impl PruneScope {
    pub fn name(self) -> &'static str {
        match self {
            PruneScope::PerLayer => "per_layer",
            PruneScope::Global => "global",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "per_layer" => Some(PruneScope::PerLayer),
            "global" => Some(PruneScope::Global),
            _ => None,
        }
    }
}

/// How each round of a schedule picks its victims.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMethod {
    /// One of the parameter-level estimators (aggregated when the schedule
    /// runs at neuron level).
    Damage(DamageMethod),
    /// Dropout-regression neuron scoring; neuron level only.
    DropoutRegression,
    /// Nearest-pair neuron merging; neuron level only.
    Merge,
}

impl SelectionMethod {
    pub fn name(self) -> &'static str {
        match self {
            SelectionMethod::Damage(m) => m.name(),
            SelectionMethod::DropoutRegression => "dropout",
            SelectionMethod::Merge => "merge",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "dropout" => Some(SelectionMethod::DropoutRegression),
            "merge" => Some(SelectionMethod::Merge),
            _ => DamageMethod::from_name(s).map(SelectionMethod::Damage),
        }
    }
}

fn check_fraction(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "prune fraction {p} outside (0, 1)"
        )));
    }
    Ok(())
}

/// Masks the lowest-damage unmasked parameters. Per-layer scope removes
/// `floor(p * remaining)` in each hidden layer; global scope pools every
/// hidden layer and removes `floor(p * total_remaining)`. Already-masked
/// parameters stay masked; `include_biases = false` restricts the candidate
/// set to weights.
pub fn prune_parameters(
    model: &Model,
    report: &DamageReport,
    p: f64,
    scope: PruneScope,
    include_biases: bool,
) -> Result<Model> {
    check_fraction(p)?;
    report.check_covers(model)?;
    let mut out = model.clone();
    let hidden_count = out.hidden_count();
    for l in out.layers.iter_mut().take(hidden_count) {
        if l.mask.is_none() {
            l.mask = Some(LayerMask::all_kept(l.out_dim, l.in_dim));
        }
    }
    // candidate = (entry index, layer); report order is the tie-break order
    let is_unmasked = |m: &Model, e: &crate::damage::DamageEntry| {
        let l = &m.layers[e.param.layer];
        let mask = l.mask.as_ref().unwrap();
        match e.param.col {
            Some(c) => mask.weights[e.param.row * l.in_dim + c],
            None => mask.bias[e.param.row],
        }
    };
    let candidates: Vec<usize> = report
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| (include_biases || e.param.col.is_some()) && is_unmasked(&out, e))
        .map(|(i, _)| i)
        .collect();

    let mut selected: Vec<usize> = Vec::new();
    match scope {
        PruneScope::Global => {
            let remove = (p * candidates.len() as f64).floor() as usize;
            selected.extend(lowest_by_damage(report, &candidates, remove));
        }
        PruneScope::PerLayer => {
            for li in 0..out.hidden_count() {
                let layer_candidates: Vec<usize> = candidates
                    .iter()
                    .copied()
                    .filter(|&i| report.entries[i].param.layer == li)
                    .collect();
                let remove = (p * layer_candidates.len() as f64).floor() as usize;
                selected.extend(lowest_by_damage(report, &layer_candidates, remove));
            }
        }
    }
    for i in selected {
        let e = &report.entries[i];
        let l = &mut out.layers[e.param.layer];
        let mask = l.mask.as_mut().unwrap();
        match e.param.col {
            Some(c) => mask.weights[e.param.row * l.in_dim + c] = false,
            None => mask.bias[e.param.row] = false,
        }
    }
    out.apply_masks();
    Ok(out)
}

fn lowest_by_damage(report: &DamageReport, candidates: &[usize], count: usize) -> Vec<usize> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|&a, &b| {
        report.entries[a]
            .damage
            .partial_cmp(&report.entries[b].damage)
            .unwrap()
            .then(a.cmp(&b))
    });
    sorted.truncate(count);
    sorted
}

/// Removes whole neurons structurally: the neuron's weight row, bias and
/// batch-norm entries disappear, along with the matching column of the next
/// layer. Per-layer scope removes `ceil(p * width)` lowest-damage neurons in
/// each hidden layer; global scope ranks every hidden neuron by damage plus
/// a scarcity penalty and never shrinks a layer below `layer_floor`.
pub fn prune_neurons(
    model: &Model,
    report: &NeuronDamageReport,
    p: f64,
    scope: PruneScope,
    layer_floor: usize,
) -> Result<Model> {
    check_fraction(p)?;
    report.check_covers(model)?;
    let removals = match scope {
        PruneScope::PerLayer => {
            let mut removals: Vec<Vec<usize>> = vec![Vec::new(); model.hidden_count()];
            for li in 0..model.hidden_count() {
                let width = model.spec.hidden[li].width;
                let remove = (p * width as f64).ceil() as usize;
                if remove >= width {
                    return Err(Error::InvalidArgument(format!(
                        "removing {remove} of {width} neurons would empty hidden layer {li}"
                    )));
                }
                let mut neurons: Vec<&crate::damage::NeuronDamageEntry> =
                    report.entries.iter().filter(|e| e.layer == li).collect();
                neurons.sort_by(|a, b| {
                    a.damage
                        .partial_cmp(&b.damage)
                        .unwrap()
                        .then(a.neuron.cmp(&b.neuron))
                });
                removals[li] = neurons[..remove].iter().map(|e| e.neuron).collect();
            }
            removals
        }
        PruneScope::Global => {
            let total: usize = model.total_hidden_neurons();
            let remove = (p * total as f64).ceil() as usize;
            global_neuron_selection(model, report, remove, layer_floor)?
        }
    };
    Ok(remove_neurons(model, &removals))
}

/// Greedy global selection: repeatedly removes the neuron minimizing
/// `damage + lambda * base_width / remaining_width`, with
/// `lambda = 0.01 * median damage`, skipping layers already at `layer_floor`.
/// The penalty grows without bound as a layer empties. Returns per-layer
/// removal lists.
pub fn global_neuron_selection(
    model: &Model,
    report: &NeuronDamageReport,
    remove_count: usize,
    layer_floor: usize,
) -> Result<Vec<Vec<usize>>> {
    if layer_floor == 0 {
        return Err(Error::InvalidArgument(
            "global scope requires layer_floor >= 1".into(),
        ));
    }
    report.check_covers(model)?;
    let widths = model.spec.hidden_widths();
    let base_widths = widths.clone();
    let mut remaining = widths;
    let mut removed: Vec<Vec<usize>> = vec![Vec::new(); model.hidden_count()];
    let mut taken = vec![false; report.entries.len()];

    let mut damages: Vec<f64> = report.entries.iter().map(|e| e.damage).collect();
    damages.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if damages.is_empty() {
        0.0
    } else {
        let mid = damages.len() / 2;
        if damages.len() % 2 == 0 {
            (damages[mid - 1] + damages[mid]) / 2.0
        } else {
            damages[mid]
        }
    };
    let lambda = 0.01 * median;

    for _ in 0..remove_count {
        let mut best: Option<(f64, usize)> = None;
        for (i, e) in report.entries.iter().enumerate() {
            if taken[i] || remaining[e.layer] <= layer_floor {
                continue;
            }
            let penalty = lambda * base_widths[e.layer] as f64 / remaining[e.layer] as f64;
            let score = e.damage + penalty;
            if best.map_or(true, |(bs, _)| score < bs) {
                best = Some((score, i));
            }
        }
        let (_, i) = best.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "cannot remove {remove_count} neurons with layer_floor {layer_floor}"
            ))
        })?;
        taken[i] = true;
        let e = &report.entries[i];
        remaining[e.layer] -= 1;
        removed[e.layer].push(e.neuron);
    }
    for list in removed.iter_mut() {
        list.sort_unstable();
    }
    Ok(removed)
}

/// Rebuilds the model with the listed hidden neurons deleted. `removals`
/// holds sorted neuron indices per hidden layer.
pub fn remove_neurons(model: &Model, removals: &[Vec<usize>]) -> Model {
    let hidden = model.hidden_count();
    assert_eq!(removals.len(), hidden, "one removal list per hidden layer");
    let keep: Vec<Vec<usize>> = (0..hidden)
        .map(|li| {
            let width = model.layers[li].out_dim;
            (0..width).filter(|j| !removals[li].contains(j)).collect()
        })
        .collect();
    let mut spec = model.spec.clone();
    for (li, k) in keep.iter().enumerate() {
        spec.hidden[li].width = k.len();
    }
    let mut layers = Vec::with_capacity(model.layers.len());
    for (li, layer) in model.layers.iter().enumerate() {
        let kept_rows: Vec<usize> = if li < hidden {
            keep[li].clone()
        } else {
            (0..layer.out_dim).collect()
        };
        let kept_cols: Vec<usize> = if li == 0 {
            (0..layer.in_dim).collect()
        } else {
            keep[li - 1].clone()
        };
        let mut weights = Vec::with_capacity(kept_rows.len() * kept_cols.len());
        for &r in &kept_rows {
            for &c in &kept_cols {
                weights.push(layer.weights[r * layer.in_dim + c]);
            }
        }
        let bias: Vec<f32> = kept_rows.iter().map(|&r| layer.bias[r]).collect();
        let batchnorm = layer.batchnorm.as_ref().map(|bn| crate::nn::BatchNorm {
            gamma: kept_rows.iter().map(|&r| bn.gamma[r]).collect(),
            beta: kept_rows.iter().map(|&r| bn.beta[r]).collect(),
            running_mean: kept_rows.iter().map(|&r| bn.running_mean[r]).collect(),
            running_var: kept_rows.iter().map(|&r| bn.running_var[r]).collect(),
        });
        let mask = layer.mask.as_ref().map(|m| {
            let mut weights_mask = Vec::with_capacity(kept_rows.len() * kept_cols.len());
            for &r in &kept_rows {
                for &c in &kept_cols {
                    weights_mask.push(m.weights[r * layer.in_dim + c]);
                }
            }
            LayerMask {
                weights: weights_mask,
                bias: kept_rows.iter().map(|&r| m.bias[r]).collect(),
            }
        });
        layers.push(crate::nn::DenseLayer {
            in_dim: kept_cols.len(),
            out_dim: kept_rows.len(),
            weights,
            bias,
            batchnorm,
            mask,
            activation: layer.activation,
            dropout: layer.dropout,
        });
    }
    let out = Model { spec, layers };
    debug_assert!(out.check_shapes().is_ok());
    out
}

/// What happens to the deleted neuron's outgoing weights when merging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MergeStyle {
    /// Add them onto the kept neuron's outgoing weights; exact for
    /// duplicate neurons.
    #[default]
    SumOutgoing,
    /// Drop them with the neuron.
    DropOutgoing,
}

/// The closest pair of neurons in a hidden layer by Euclidean distance over
/// incoming weights + bias; ties resolve to the smallest (i, j).
pub fn nearest_pair(model: &Model, layer_index: usize) -> Result<(usize, usize)> {
    if layer_index >= model.hidden_count() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer_index} is not a hidden layer"
        )));
    }
    let l = &model.layers[layer_index];
    if l.out_dim < 2 {
        return Err(Error::InvalidArgument("layer has fewer than 2 neurons".into()));
    }
    let mut best = (f64::INFINITY, 0usize, 1usize);
    for i in 0..l.out_dim {
        for j in i + 1..l.out_dim {
            let mut d = 0.0f64;
            for c in 0..l.in_dim {
                let diff = (l.weights[i * l.in_dim + c] - l.weights[j * l.in_dim + c]) as f64;
                d += diff * diff;
            }
            let diff = (l.bias[i] - l.bias[j]) as f64;
            d += diff * diff;
            if d < best.0 {
                best = (d, i, j);
            }
        }
    }
    Ok((best.1, best.2))
}

/// Iteratively merges the closest remaining pair of neurons in a layer,
/// `merge_count` times, recomputing distances after every merge. The kept
/// neuron receives the average of the pair's incoming weights, bias and
/// batch-norm state; outgoing weights follow `style`.
pub fn merge_neurons(
    model: &Model,
    layer_index: usize,
    merge_count: usize,
    style: MergeStyle,
) -> Result<Model> {
    if layer_index >= model.hidden_count() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer_index} is not a hidden layer"
        )));
    }
    let width = model.layers[layer_index].out_dim;
    if merge_count > width.saturating_sub(1) {
        return Err(Error::InvalidArgument(format!(
            "merge_count {merge_count} exceeds layer width - 1 = {}",
            width - 1
        )));
    }
    let mut m = model.clone();
    for _ in 0..merge_count {
        let (keep, del) = nearest_pair(&m, layer_index)?;
        merge_pair(&mut m, layer_index, keep, del, style);
        let mut removals = vec![Vec::new(); m.hidden_count()];
        removals[layer_index] = vec![del];
        m = remove_neurons(&m, &removals);
    }
    Ok(m)
}

fn merge_pair(m: &mut Model, layer_index: usize, keep: usize, del: usize, style: MergeStyle) {
    {
        let l = &mut m.layers[layer_index];
        let in_dim = l.in_dim;
        for c in 0..in_dim {
            let avg = 0.5 * (l.weights[keep * in_dim + c] + l.weights[del * in_dim + c]);
            l.weights[keep * in_dim + c] = avg;
        }
        l.bias[keep] = 0.5 * (l.bias[keep] + l.bias[del]);
        if let Some(bn) = &mut l.batchnorm {
            bn.gamma[keep] = 0.5 * (bn.gamma[keep] + bn.gamma[del]);
            bn.beta[keep] = 0.5 * (bn.beta[keep] + bn.beta[del]);
            bn.running_mean[keep] = 0.5 * (bn.running_mean[keep] + bn.running_mean[del]);
            bn.running_var[keep] = 0.5 * (bn.running_var[keep] + bn.running_var[del]);
        }
        if let Some(mask) = &mut l.mask {
            // the merged value is only structurally zero when both were
            for c in 0..in_dim {
                mask.weights[keep * in_dim + c] =
                    mask.weights[keep * in_dim + c] || mask.weights[del * in_dim + c];
            }
            mask.bias[keep] = mask.bias[keep] || mask.bias[del];
        }
    }
    if style == MergeStyle::SumOutgoing {
        let next = &mut m.layers[layer_index + 1];
        let in_dim = next.in_dim;
        for r in 0..next.out_dim {
            next.weights[r * in_dim + keep] += next.weights[r * in_dim + del];
        }
        if let Some(mask) = &mut next.mask {
            for r in 0..next.out_dim {
                mask.weights[r * in_dim + keep] =
                    mask.weights[r * in_dim + keep] || mask.weights[r * in_dim + del];
            }
        }
    }
    m.apply_masks();
}

/// Fine-tuning budget for one round of the loop.
#[derive(Debug, Clone)]
pub struct FinetuneSpec {
    pub epochs: usize,
    pub sample_count: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        FinetuneSpec {
            epochs: 1,
            sample_count: 10_000,
            batch_size: 128,
            learning_rate: 0.01,
        }
    }
}

/// Full description of an iterative pruning protocol.
#[derive(Debug, Clone)]
pub struct PruneSchedule {
    pub level: PruneLevel,
    pub method: SelectionMethod,
    /// Fraction pruned per round, default 0.10.
    pub fraction_per_round: f64,
    pub rounds: usize,
    pub finetune: FinetuneSpec,
    pub scope: PruneScope,
    /// Minimum surviving neurons per layer under global neuron scope.
    pub layer_floor: usize,
    pub seed: u64,
    /// Samples drawn from the training set for each round's damage batch.
    pub damage_sample_count: usize,
    pub target_fpr: f64,
    /// Recompute the damage report every round (the default) or reuse the
    /// round-1 report.
    pub recompute_damage: bool,
    pub include_biases: bool,
    pub precision: Precision,
}

impl PruneSchedule {
    pub fn new(level: PruneLevel, method: SelectionMethod, rounds: usize, seed: u64) -> Self {
        PruneSchedule {
            level,
            method,
            fraction_per_round: 0.10,
            rounds,
            finetune: FinetuneSpec::default(),
            scope: PruneScope::PerLayer,
            layer_floor: 1,
            seed,
            damage_sample_count: 4096,
            target_fpr: 0.001,
            recompute_damage: true,
            include_biases: true,
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_fraction(self.fraction_per_round)?;
        if self.level == PruneLevel::Parameter
            && !matches!(self.method, SelectionMethod::Damage(_))
        {
            return Err(Error::InvalidArgument(format!(
                "method {} applies to neuron-level schedules only",
                self.method.name()
            )));
        }
        if self.scope == PruneScope::Global && self.layer_floor == 0 {
            return Err(Error::InvalidArgument(
                "global scope requires layer_floor >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One evaluated state of the loop.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub round: usize,
    pub surviving_params: usize,
    pub neurons_per_layer: Vec<usize>,
    pub sizes: SizeReport,
    pub metrics: MetricsRecord,
    /// Mean/SD diagnostics of the round's damage report (OBD family only).
    pub vshape: Option<VShapeStats>,
}

/// The data behind one pruning curve: round 0 is the unpruned baseline.
#[derive(Debug, Clone)]
pub struct PruneTrace {
    pub method: String,
    pub level: PruneLevel,
    pub rows: Vec<TraceRow>,
    /// Set when training diverged and the trace was truncated.
    pub error: Option<String>,
}

impl PruneTrace {
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("round,method,level,params,neurons_per_layer,raw_bytes,zip_bytes,auc,tpr_at_fpr,loss\n");
        for r in &self.rows {
            let widths: Vec<String> = r.neurons_per_layer.iter().map(|w| w.to_string()).collect();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.round,
                self.method,
                self.level.name(),
                r.surviving_params,
                widths.join("|"),
                r.sizes.raw_bytes,
                r.sizes.zip_bytes,
                r.metrics.auc,
                r.metrics.tpr_at_fpr,
                r.metrics.mean_loss,
            ));
        }
        s
    }
}

fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut x = a
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(c.wrapping_mul(0x94d0_49bb_1331_11eb));
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x
}

fn trace_row(
    model: &Model,
    round: usize,
    eval: &Batch,
    schedule: &PruneSchedule,
    vshape: Option<VShapeStats>,
) -> Result<TraceRow> {
    Ok(TraceRow {
        round,
        surviving_params: model.unmasked_prunable_param_count(),
        neurons_per_layer: model.spec.hidden_widths(),
        sizes: measure_sizes(model, StoragePrecision::F32),
        metrics: evaluate(model, eval, schedule.target_fpr, schedule.precision)?,
        vshape,
    })
}

use crate::nn::model::Batch;

/// Runs the iterative protocol: per round, re-estimate damage on the current
/// model, prune, fine-tune on a freshly resampled subset, evaluate and
/// append. Training divergence truncates the trace with an error record
/// instead of failing.
pub fn prune_finetune_loop(
    model: &Model,
    schedule: &PruneSchedule,
    train_set: &Dataset,
    eval_set: &Dataset,
) -> Result<PruneTrace> {
    schedule.validate()?;
    let eval = eval_set.as_batch();
    let mut trace = PruneTrace {
        method: schedule.method.name().to_string(),
        level: schedule.level,
        rows: vec![trace_row(model, 0, &eval, schedule, None)?],
        error: None,
    };
    let mut current = model.clone();
    let mut cached_param_report: Option<DamageReport> = None;
    let mut cached_neuron_report: Option<NeuronDamageReport> = None;

    for round in 1..=schedule.rounds {
        let damage_batch = if matches!(
            schedule.method,
            SelectionMethod::Damage(m) if m.needs_batch()
        ) || schedule.method == SelectionMethod::DropoutRegression
        {
            let count = schedule.damage_sample_count.min(train_set.n);
            Some(resample(train_set, count, mix_seed(schedule.seed, round as u64, 0))?)
        } else {
            None
        };

        let mut vshape = None;
        match (schedule.level, schedule.method) {
            (PruneLevel::Parameter, SelectionMethod::Damage(dm)) => {
                let fresh = schedule.recompute_damage || cached_param_report.is_none();
                if fresh {
                    let batch = damage_batch.as_ref().map(|d| d.as_batch());
                    cached_param_report = Some(damage_by_method(
                        &current,
                        dm,
                        batch.as_ref(),
                        mix_seed(schedule.seed, round as u64, 1),
                        schedule.precision,
                    )?);
                }
                let report = cached_param_report.as_ref().unwrap();
                if matches!(dm, DamageMethod::Obd | DamageMethod::ObdSd) {
                    vshape = v_shape_stats(report).ok();
                }
                current = prune_parameters(
                    &current,
                    report,
                    schedule.fraction_per_round,
                    schedule.scope,
                    schedule.include_biases,
                )?;
                if schedule.recompute_damage {
                    cached_param_report = None;
                }
            }
            (PruneLevel::Neuron, SelectionMethod::Merge) => {
                for li in 0..current.hidden_count() {
                    let width = current.layers[li].out_dim;
                    let count = (schedule.fraction_per_round * width as f64).ceil() as usize;
                    if count >= width {
                        return Err(Error::InvalidArgument(format!(
                            "merging {count} of {width} neurons would empty hidden layer {li}"
                        )));
                    }
                    current = merge_neurons(&current, li, count, MergeStyle::SumOutgoing)?;
                }
            }
            (PruneLevel::Neuron, method) => {
                let fresh = schedule.recompute_damage || cached_neuron_report.is_none();
                if fresh {
                    let nreport = match method {
                        SelectionMethod::DropoutRegression => {
                            let ds = damage_batch.as_ref().expect("dropout needs a batch");
                            let cfg = DropoutRegressionConfig::defaults_for(
                                &current,
                                mix_seed(schedule.seed, round as u64, 1),
                            );
                            damage_dropout_regression(&current, &ds.as_batch(), &cfg)?
                        }
                        SelectionMethod::Damage(dm) => {
                            let batch = damage_batch.as_ref().map(|d| d.as_batch());
                            let report = damage_by_method(
                                &current,
                                dm,
                                batch.as_ref(),
                                mix_seed(schedule.seed, round as u64, 1),
                                schedule.precision,
                            )?;
                            if matches!(dm, DamageMethod::Obd | DamageMethod::ObdSd) {
                                vshape = v_shape_stats(&report).ok();
                            }
                            aggregate_to_neurons(&report, &current, false)?
                        }
                        SelectionMethod::Merge => unreachable!(),
                    };
                    cached_neuron_report = Some(nreport);
                }
                current = prune_neurons(
                    &current,
                    cached_neuron_report.as_ref().unwrap(),
                    schedule.fraction_per_round,
                    schedule.scope,
                    schedule.layer_floor,
                )?;
                if schedule.recompute_damage {
                    cached_neuron_report = None;
                } else if cached_neuron_report
                    .as_ref()
                    .is_some_and(|r| r.check_covers(&current).is_err())
                {
                    // structural removal invalidated the neuron indices;
                    // recompute next round despite the reuse flag
                    cached_neuron_report = None;
                }
            }
            (PruneLevel::Parameter, _) => unreachable!("validated"),
        }

        if schedule.finetune.epochs > 0 && schedule.finetune.sample_count > 0 {
            let count = schedule.finetune.sample_count.min(train_set.n);
            let subset = resample(train_set, count, mix_seed(schedule.seed, round as u64, 2))?;
            let cfg = TrainConfig {
                epochs: schedule.finetune.epochs,
                batch_size: schedule.finetune.batch_size,
                learning_rate: schedule.finetune.learning_rate,
                seed: mix_seed(schedule.seed, round as u64, 3),
            };
            match train(&current, &subset.as_batch(), &cfg) {
                Ok(t) => current = t,
                Err(e @ Error::Diverged { .. }) => {
                    trace.error = Some(format!("round {round}: {e}"));
                    return Ok(trace);
                }
                Err(e) => return Err(e),
            }
        }
        trace.rows.push(trace_row(&current, round, &eval, schedule, vshape)?);
    }
    Ok(trace)
}

/// How a reduced architecture for from-scratch training is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScratchMode {
    NeuronFraction,
    ConnectionFraction,
    FromNeuronReport,
}

impl ScratchMode {
    pub fn name(self) -> &'static str {
        match self {
            ScratchMode::NeuronFraction => "neuron_fraction",
            ScratchMode::ConnectionFraction => "connection_fraction",
            ScratchMode::FromNeuronReport => "from_neuron_report",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "neuron_fraction" => Some(ScratchMode::NeuronFraction),
            "connection_fraction" => Some(ScratchMode::ConnectionFraction),
            "from_neuron_report" => Some(ScratchMode::FromNeuronReport),
            _ => None,
        }
    }
}

fn check_scratch_amount(amount: f64) -> Result<()> {
    if !(0.0..1.0).contains(&amount) {
        return Err(Error::InvalidArgument(format!(
            "scratch amount {amount} outside [0, 1)"
        )));
    }
    Ok(())
}

/// Shrinks every hidden width to `floor(width * (1 - amount))`; amount 0 is
/// the identity.
pub fn scratch_neuron_spec(base: &ModelSpec, amount: f64) -> Result<ModelSpec> {
    check_scratch_amount(amount)?;
    let mut spec = base.clone();
    for (i, l) in spec.hidden.iter_mut().enumerate() {
        let w = (l.width as f64 * (1.0 - amount)).floor() as usize;
        if w == 0 {
            return Err(Error::InvalidArgument(format!(
                "amount {amount} empties hidden layer {i}"
            )));
        }
        l.width = w;
    }
    Ok(spec)
}

/// Initializes a fresh model and masks a seeded random `amount` of each
/// hidden layer's weights before any training; raw file size is unchanged
/// because the dense matrices keep their shape.
pub fn scratch_connection_model(base: &ModelSpec, amount: f64, seed: u64) -> Result<Model> {
    check_scratch_amount(amount)?;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut model = init_random(base, seed)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(seed, 0, 4));
    let hidden = model.hidden_count();
    for l in model.layers.iter_mut().take(hidden) {
        let n = l.weights.len();
        let zeroed = ((amount * n as f64) + 0.5).floor() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let mut mask = LayerMask::all_kept(l.out_dim, l.in_dim);
        for &i in idx.iter().take(zeroed) {
            mask.weights[i] = false;
        }
        l.mask = Some(mask);
        l.apply_mask();
    }
    Ok(model)
}

/// Architecture implied by a global neuron selection at the given removal
/// fraction: the widths that survive.
pub fn scratch_spec_from_report(
    model: &Model,
    report: &NeuronDamageReport,
    amount: f64,
    layer_floor: usize,
) -> Result<ModelSpec> {
    check_scratch_amount(amount)?;
    let total = model.total_hidden_neurons();
    let remove = (amount * total as f64).ceil() as usize;
    let removals = global_neuron_selection(model, report, remove, layer_floor)?;
    let mut spec = model.spec.clone();
    for (li, l) in spec.hidden.iter_mut().enumerate() {
        l.width -= removals[li].len();
    }
    spec.validate()?;
    Ok(spec)
}

/// Eval-mode forward used by the merge conservation checks.
pub fn eval_scores(model: &Model, features: &[f32], n: usize) -> Result<Vec<f64>> {
    crate::nn::forward(
        model,
        features,
        n,
        model.spec.input_dim,
        Mode::Eval,
        0,
        Precision::F64,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::damage::{damage_magnitude, damage_random};
    use crate::nn::activation::Activation;
    use crate::nn::model::LayerSpec;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(widths: &[usize], input_dim: usize) -> ModelSpec {
        ModelSpec {
            input_dim,
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

    #[test]
    fn per_layer_masks_exact_count() {
        let m = init_random(&spec(&[10, 10], 10), 1).unwrap();
        // layer 0: 10*10 + 10 = 110 params; layer 1: 110
        let report = damage_magnitude(&m).unwrap();
        let pruned = prune_parameters(&m, &report, 0.10, PruneScope::PerLayer, true).unwrap();
        assert_eq!(
            pruned.layers[0].unmasked_dense_param_count(),
            110 - 11
        );
        assert_eq!(pruned.layers[1].unmasked_dense_param_count(), 110 - 11);
        // output layer untouched
        assert!(pruned.layers[2].mask.is_none());
    }

    #[test]
    fn tiny_fraction_rounds_to_noop() {
        let m = init_random(&spec(&[5], 4), 2).unwrap();
        let report = damage_magnitude(&m).unwrap();
        let pruned = prune_parameters(&m, &report, 0.01, PruneScope::PerLayer, true).unwrap();
        assert_eq!(
            pruned.unmasked_prunable_param_count(),
            m.prunable_param_count()
        );
        let masked = pruned.without_masks();
        let orig = m.clone();
        assert_eq!(masked.layers[0].weights, orig.layers[0].weights);
    }

    #[test]
    fn magnitude_pruning_masks_smallest_by_independent_sort() {
        let m = init_random(&spec(&[10], 10), 3).unwrap();
        let report = damage_magnitude(&m).unwrap();
        let pruned = prune_parameters(&m, &report, 0.10, PruneScope::PerLayer, true).unwrap();
        // floor(0.10 * 110) = 11 removed: every zero bias plus the smallest weight
        let mut all: Vec<(f64, usize)> = m.layers[0]
            .weights
            .iter()
            .map(|w| w.abs() as f64)
            .chain(m.layers[0].bias.iter().map(|b| b.abs() as f64))
            .enumerate()
            .map(|(i, v)| (v, i))
            .collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let expect_masked: std::collections::BTreeSet<usize> =
            all[..11].iter().map(|&(_, i)| i).collect();
        let mask = pruned.layers[0].mask.as_ref().unwrap();
        let got_masked: std::collections::BTreeSet<usize> = mask
            .weights
            .iter()
            .chain(mask.bias.iter())
            .enumerate()
            .filter(|(_, &k)| !k)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(expect_masked, got_masked);
    }

    #[test]
    fn repruning_skips_already_masked() {
        let m = init_random(&spec(&[10], 10), 4).unwrap();
        let report = damage_magnitude(&m).unwrap();
        let once = prune_parameters(&m, &report, 0.10, PruneScope::PerLayer, true).unwrap();
        let report2 = damage_magnitude(&once).unwrap();
        let twice = prune_parameters(&once, &report2, 0.10, PruneScope::PerLayer, true).unwrap();
        // 110 -> 99 -> 90 (floor arithmetic = ceil survivors)
        assert_eq!(once.layers[0].unmasked_dense_param_count(), 99);
        assert_eq!(twice.layers[0].unmasked_dense_param_count(), 90);
        let m1 = once.layers[0].mask.as_ref().unwrap();
        let m2 = twice.layers[0].mask.as_ref().unwrap();
        for i in 0..m1.weights.len() {
            assert!(m1.weights[i] || !m2.weights[i], "mask persistence");
        }
    }

    #[test]
    fn neuron_prune_widths_follow_ceil_removal() {
        let m = init_random(&spec(&[10, 8], 6), 5).unwrap();
        let report = damage_random(&m, 1).unwrap();
        let nreport = aggregate_to_neurons(&report, &m, false).unwrap();
        let pruned = prune_neurons(&m, &nreport, 0.10, PruneScope::PerLayer, 1).unwrap();
        assert_eq!(pruned.spec.hidden_widths(), vec![9, 7]);
        pruned.check_shapes().unwrap();
        // chained shapes: next layer lost a column
        assert_eq!(pruned.layers[1].in_dim, 9);
        assert_eq!(pruned.layers[2].in_dim, 7);
    }

    #[test]
    fn removing_dead_neuron_preserves_outputs_bitwise() {
        let mut m = init_random(&spec(&[6, 4], 5), 6).unwrap();
        // neuron 2 of layer 0 has zero outgoing weights
        for r in 0..4 {
            m.layers[1].weights[r * 6 + 2] = 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let feats: Vec<f32> = (0..5 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let before = eval_scores(&m, &feats, 8).unwrap();
        let mut removals = vec![Vec::new(); 2];
        removals[0] = vec![2];
        let smaller = remove_neurons(&m, &removals);
        assert_eq!(smaller.spec.hidden_widths(), vec![5, 4]);
        let after = eval_scores(&smaller, &feats, 8).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn per_layer_neuron_prune_rejects_emptying() {
        let m = init_random(&spec(&[2], 3), 8).unwrap();
        let report = damage_random(&m, 1).unwrap();
        let nreport = aggregate_to_neurons(&report, &m, false).unwrap();
        assert!(prune_neurons(&m, &nreport, 0.9, PruneScope::PerLayer, 1).is_err());
    }

    #[test]
    fn global_scope_respects_layer_floor() {
        let m = init_random(&spec(&[6, 6, 6], 4), 9).unwrap();
        // craft a report that makes layer 1 look uniformly cheapest
        let mut entries = Vec::new();
        for (li, l) in m.spec.hidden.iter().enumerate() {
            for j in 0..l.width {
                entries.push(crate::damage::NeuronDamageEntry {
                    layer: li,
                    neuron: j,
                    damage: if li == 1 { 0.0 } else { 1.0 + j as f64 },
                });
            }
        }
        let nreport = NeuronDamageReport {
            entries,
            source: crate::damage::NeuronDamageSource::ParameterAggregation,
        };
        let removals = global_neuron_selection(&m, &nreport, 8, 2).unwrap();
        assert!(removals[1].len() <= 4, "layer 1 kept at least the floor");
        let total: usize = removals.iter().map(|r| r.len()).sum();
        assert_eq!(total, 8);
        let pruned = prune_neurons(&m, &nreport, 0.4, PruneScope::Global, 2).unwrap();
        assert!(pruned.spec.hidden_widths().iter().all(|&w| w >= 2));
    }

    #[test]
    fn duplicate_neuron_merge_is_function_preserving() {
        let mut m = init_random(&spec(&[5, 4], 6), 10).unwrap();
        // make neurons 1 and 3 of layer 0 identical
        for c in 0..6 {
            let v = m.layers[0].weights[1 * 6 + c];
            m.layers[0].weights[3 * 6 + c] = v;
        }
        m.layers[0].bias[3] = m.layers[0].bias[1];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let feats: Vec<f32> = (0..6 * 16).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let before = eval_scores(&m, &feats, 16).unwrap();
        let merged = merge_neurons(&m, 0, 1, MergeStyle::SumOutgoing).unwrap();
        assert_eq!(merged.spec.hidden_widths(), vec![4, 4]);
        let after = eval_scores(&merged, &feats, 16).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn nearest_pair_picks_closest_incoming_vectors() {
        let mut m = init_random(&spec(&[3], 2), 12).unwrap();
        let l = &mut m.layers[0];
        l.weights.copy_from_slice(&[0.0, 0.0, 0.0, 0.1, 5.0, 5.0]);
        l.bias.copy_from_slice(&[0.0, 0.0, 0.0]);
        assert_eq!(nearest_pair(&m, 0).unwrap(), (0, 1));
    }

    #[test]
    fn merge_count_validation() {
        let m = init_random(&spec(&[3], 2), 13).unwrap();
        assert!(merge_neurons(&m, 0, 3, MergeStyle::SumOutgoing).is_err());
        assert!(merge_neurons(&m, 0, 2, MergeStyle::SumOutgoing).is_ok());
    }

    #[test]
    fn linear_model_merge_residual_matches_algebra() {
        // Identity activations everywhere: merging neurons i and j changes
        // the logit by exactly -(w_i - w_j) ((r_i - r_j) x + (b_i - b_j)) / 2
        // where w are outgoing weights and (r, b) the incoming rows/biases.
        let spec = ModelSpec {
            input_dim: 3,
            hidden: vec![LayerSpec {
                width: 4,
                activation: Activation::Identity,
                batchnorm: false,
                dropout: 0.0,
            }],
            output_width: 1,
        };
        let m = init_random(&spec, 21).unwrap();
        let (i, j) = nearest_pair(&m, 0).unwrap();
        let merged = merge_neurons(&m, 0, 1, MergeStyle::SumOutgoing).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let n = 10;
        let feats: Vec<f32> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let before = crate::nn::logits(&m, &feats, n, 3, crate::nn::Mode::Eval, 0, Precision::F64)
            .unwrap();
        let after =
            crate::nn::logits(&merged, &feats, n, 3, crate::nn::Mode::Eval, 0, Precision::F64)
                .unwrap();
        let l0 = &m.layers[0];
        let wi = m.layers[1].weights[i] as f64;
        let wj = m.layers[1].weights[j] as f64;
        for s in 0..n {
            let x = &feats[s * 3..(s + 1) * 3];
            let act = |row: usize| -> f64 {
                let mut z = l0.bias[row] as f64;
                for (c, &xv) in x.iter().enumerate() {
                    z += l0.weights[row * 3 + c] as f64 * xv as f64;
                }
                z
            };
            let residual = -0.5 * (wi - wj) * (act(i) - act(j));
            let observed = after[s] - before[s];
            assert!(
                (observed - residual).abs() < 1e-5,
                "sample {s}: observed {observed} vs algebraic {residual}"
            );
        }
    }

    #[test]
    fn loop_with_zero_rounds_is_baseline_only() {
        use crate::data::{synth_generate, SynthConfig};
        let cfg = SynthConfig {
            n_train: 300,
            n_test: 120,
            feature_dim: 4,
            pos_balance_train: 0.5,
            pos_balance_test: 0.5,
            difficulty: 2.0,
            seed: 3,
        };
        let (train_ds, test_ds) = synth_generate(&cfg).unwrap();
        let model = init_random(&spec(&[6, 5], 4), 2).unwrap();
        let schedule = PruneSchedule::new(
            PruneLevel::Parameter,
            SelectionMethod::Damage(DamageMethod::Magnitude),
            0,
            1,
        );
        let trace = prune_finetune_loop(&model, &schedule, &train_ds, &test_ds).unwrap();
        assert_eq!(trace.rows.len(), 1);
        assert_eq!(trace.rows[0].round, 0);
        assert_eq!(
            trace.rows[0].surviving_params,
            model.prunable_param_count()
        );
    }

    #[test]
    fn loop_survivor_fraction_follows_geometric_decay() {
        use crate::data::{synth_generate, SynthConfig};
        let cfg = SynthConfig {
            n_train: 300,
            n_test: 120,
            feature_dim: 9,
            pos_balance_train: 0.5,
            pos_balance_test: 0.5,
            difficulty: 2.0,
            seed: 4,
        };
        let (train_ds, test_ds) = synth_generate(&cfg).unwrap();
        // layer 0 carries exactly 100 prunable parameters (10*9 + 10)
        let model = init_random(&spec(&[10, 10], 9), 5).unwrap();
        let mut schedule = PruneSchedule::new(
            PruneLevel::Parameter,
            SelectionMethod::Damage(DamageMethod::Magnitude),
            3,
            1,
        );
        schedule.finetune.epochs = 0; // isolate the pruning arithmetic
        let trace = prune_finetune_loop(&model, &schedule, &train_ds, &test_ds).unwrap();
        // each round keeps ceil(0.9 * remaining) per layer
        let mut l0 = 100usize;
        let mut l1 = 10 * 10 + 10;
        for round in 1..=3 {
            l0 -= l0 / 10;
            l1 -= l1 / 10;
            assert_eq!(
                trace.rows[round].surviving_params,
                l0 + l1,
                "round {round}"
            );
            assert_eq!(l0, (l0 as f64).max(0.0) as usize); // l0 stays integral
        }
        // for the 100-parameter layer three rounds land exactly on
        // ceil(100 * 0.9^3) = 73
        assert_eq!(l0, (100.0f64 * 0.9f64.powi(3)).ceil() as usize);
        assert_eq!(l0, 73);
    }

    #[test]
    fn scratch_amount_zero_is_identity() {
        let base = spec(&[10, 8], 6);
        assert_eq!(scratch_neuron_spec(&base, 0.0).unwrap(), base);
        let conn = scratch_connection_model(&base, 0.0, 1).unwrap();
        let mask = conn.layers[0].mask.as_ref().unwrap();
        assert!(mask.weights.iter().all(|&k| k));
    }

    #[test]
    fn scratch_architectures() {
        let base = spec(&[128, 96, 64, 64, 64], 64);
        let half = scratch_neuron_spec(&base, 0.5).unwrap();
        assert_eq!(half.hidden_widths(), vec![64, 48, 32, 32, 32]);
        assert!(scratch_neuron_spec(&spec(&[1], 4), 0.9).is_err());

        let conn = scratch_connection_model(&spec(&[10, 10], 10), 0.5, 3).unwrap();
        for li in 0..2 {
            let mask = conn.layers[li].mask.as_ref().unwrap();
            let zeroed = mask.weights.iter().filter(|&&k| !k).count();
            assert_eq!(zeroed, 50, "exactly half of layer {li} weights masked");
            assert!(mask.bias.iter().all(|&k| k));
        }
        // raw size unchanged by masking
        let plain = init_random(&spec(&[10, 10], 10), 3).unwrap();
        assert_eq!(
            measure_sizes(&plain, StoragePrecision::F32).raw_bytes,
            measure_sizes(&conn, StoragePrecision::F32).raw_bytes
        );
    }
}
