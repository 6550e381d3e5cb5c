//! Experiment orchestration behind the `prunekit` binary: `train`, `prune`,
//! `quantize` and `report` subcommands, all driven by one JSON config.
//!
//! Every command is rerunnable: identical config and seeds produce
//! byte-identical CSV outputs in single-threaded mode, and no command
//! mutates its input files. Sweeps parallelize across (run, seed) pairs;
//! each pair owns its output files exclusively.

pub mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::compress::{
    deserialize, evaluate_quantized, measure_sizes, serialize, SizeReport, StoragePrecision,
};
use crate::damage::{aggregate_to_neurons, damage_obd_sd};
use crate::data::{load_csv, resample, synth_generate, DataRole, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsRecord};
use crate::nn::model::{Model, ModelSpec};
use crate::nn::train::train;
use crate::nn::init_random;
use crate::prune::{
    prune_finetune_loop, scratch_connection_model, scratch_neuron_spec, scratch_spec_from_report,
    ScratchMode,
};
use crate::scalar::Precision;
pub use config::{DatasetConfig, ExperimentConfig, RunConfig, ScratchRunConfig};

/// Invocation-level options shared by the subcommands.
#[derive(Debug, Clone)]
pub struct CliOptions {
    pub out_dir: PathBuf,
    pub threads: usize,
    /// Storage precision for model files written by `train`.
    pub precision: StoragePrecision,
    /// Overrides the dataset and training seeds when set.
    pub seed: Option<u64>,
}

impl Default for CliOptions {
    fn default() -> Self {
        CliOptions {
            out_dir: PathBuf::from("out"),
            threads: 1,
            precision: StoragePrecision::F32,
            seed: None,
        }
    }
}

pub fn base_model_path(out_dir: &Path) -> PathBuf {
    out_dir.join("base_model.pkm")
}

/// Materializes the config's dataset. Synth data is regenerated
/// deterministically; CSV data is loaded with train/test roles attached.
pub fn load_data(cfg: &ExperimentConfig, seed: Option<u64>) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetConfig::Synth(s) => {
            let mut s = s.clone();
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let (train, test) = synth_generate(&s)?;
            if test.labels.iter().filter(|&&l| l == 0).count() < 1000 {
                eprintln!(
                    "warning: test set has fewer than 1000 negatives; TPR@FPR={} will be coarse",
                    cfg.target_fpr
                );
            }
            Ok((train, test))
        }
        DatasetConfig::Csv { train, test } => {
            let mut tr = load_csv(Path::new(train))?;
            tr.role = DataRole::Train;
            let mut te = load_csv(Path::new(test))?;
            te.role = DataRole::Test;
            if tr.dim != te.dim {
                return Err(Error::Config(format!(
                    "csv feature widths differ: train {} vs test {}",
                    tr.dim, te.dim
                )));
            }
            Ok((tr, te))
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn metrics_csv_row(
    name: &str,
    mode: &str,
    level: &str,
    amount: f64,
    seed: u64,
    sizes: &SizeReport,
    m: &MetricsRecord,
) -> String {
    format!(
        "{name},{mode},{level},{amount},{seed},{},{},{},{},{},{}\n",
        sizes.nonzero_param_count, sizes.raw_bytes, sizes.zip_bytes, m.auc, m.tpr_at_fpr, m.mean_loss
    )
}

const METRICS_HEADER: &str =
    "name,mode,level,amount,seed,params,raw_bytes,zip_bytes,auc,tpr_at_fpr,loss\n";

/// Trains the base model (and any configured from-scratch variants), writing
/// serialized models plus a metrics CSV per family.
pub fn cmd_train(cfg: &ExperimentConfig, opts: &CliOptions) -> Result<()> {
    let (train_ds, test_ds) = load_data(cfg, opts.seed)?;
    let spec = cfg.resolve_spec(train_ds.dim)?;
    let mut train_cfg = cfg.train.to_train_config();
    if let Some(seed) = opts.seed {
        train_cfg.seed = seed;
    }

    let base0 = init_random(&spec, train_cfg.seed)?;
    let base = train(&base0, &train_ds.as_batch(), &train_cfg)?;
    let enc = serialize(&base, opts.precision);
    std::fs::create_dir_all(&opts.out_dir)?;
    std::fs::write(base_model_path(&opts.out_dir), &enc.bytes)
        .map_err(|e| Error::Io(format!("write base model: {e}")))?;

    let sizes = measure_sizes(&base, StoragePrecision::F32);
    let metrics = evaluate(&base, &test_ds.as_batch(), cfg.target_fpr, Precision::F32)?;
    let mut train_table = String::from(METRICS_HEADER);
    train_table.push_str(&metrics_csv_row(
        "base",
        "base",
        "none",
        0.0,
        train_cfg.seed,
        &sizes,
        &metrics,
    ));
    write_text(&opts.out_dir.join("train_metrics.csv"), &train_table)?;

    if cfg.scratch.is_empty() {
        return Ok(());
    }

    // from_neuron_report variants shrink the architecture suggested by the
    // trained base's neuron damages
    let needs_report = cfg
        .scratch
        .iter()
        .any(|s| matches!(s.mode(), Ok(ScratchMode::FromNeuronReport)));
    let neuron_report = if needs_report {
        let count = 4096.min(train_ds.n);
        let damage_ds = resample(&train_ds, count, train_cfg.seed ^ 0x9e37_79b9)?;
        let report = damage_obd_sd(&base, &damage_ds.as_batch(), Precision::F32)?;
        Some(aggregate_to_neurons(&report, &base, false)?)
    } else {
        None
    };

    struct Job {
        run: ScratchRunConfig,
        seed: u64,
    }
    let mut jobs = Vec::new();
    for s in &cfg.scratch {
        for &seed in &s.seeds {
            jobs.push(Job {
                run: s.clone(),
                seed,
            });
        }
    }
    let rows: Mutex<Vec<(String, u64, String)>> = Mutex::new(Vec::new());
    let base_ref = &base;
    let spec_ref = &spec;
    let report_ref = &neuron_report;
    let train_ref = &train_ds;
    let test_ref = &test_ds;
    run_jobs(jobs, opts.threads, |job| {
        let mode = job.run.mode()?;
        let epochs = job.run.epochs.unwrap_or(cfg.train.epochs);
        let model0 = match mode {
            ScratchMode::NeuronFraction => {
                let s = scratch_neuron_spec(spec_ref, job.run.amount)?;
                init_random(&s, job.seed)?
            }
            ScratchMode::ConnectionFraction => {
                scratch_connection_model(spec_ref, job.run.amount, job.seed)?
            }
            ScratchMode::FromNeuronReport => {
                let report = report_ref.as_ref().expect("report precomputed");
                let s = scratch_spec_from_report(
                    base_ref,
                    report,
                    job.run.amount,
                    job.run.layer_floor,
                )?;
                init_random(&s, job.seed)?
            }
        };
        let tc = crate::nn::train::TrainConfig {
            epochs,
            batch_size: cfg.train.batch_size,
            learning_rate: cfg.train.learning_rate,
            seed: job.seed,
        };
        let trained = train(&model0, &train_ref.as_batch(), &tc)?;
        let enc = serialize(&trained, opts.precision);
        let path = opts
            .out_dir
            .join("models")
            .join(format!("{}__seed{}.pkm", job.run.name, job.seed));
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, &enc.bytes)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let sizes = measure_sizes(&trained, StoragePrecision::F32);
        let m = evaluate(&trained, &test_ref.as_batch(), cfg.target_fpr, Precision::F32)?;
        let row = metrics_csv_row(
            &job.run.name,
            mode.name(),
            job.run.analog_level()?.name(),
            job.run.amount,
            job.seed,
            &sizes,
            &m,
        );
        rows.lock()
            .unwrap()
            .push((job.run.name.clone(), job.seed, row));
        Ok(())
    })?;
    let mut rows = rows.into_inner().unwrap();
    rows.sort();
    let mut table = String::from(METRICS_HEADER);
    for (_, _, row) in rows {
        table.push_str(&row);
    }
    write_text(&opts.out_dir.join("scratch_metrics.csv"), &table)?;
    Ok(())
}

/// Runs every configured pruning schedule for every seed, writing one trace
/// CSV per (run, seed) under `traces/`, plus mean/SD shape diagnostics under
/// `vshape/` for the OBD-family methods.
pub fn cmd_prune(cfg: &ExperimentConfig, opts: &CliOptions) -> Result<()> {
    let model_path = base_model_path(&opts.out_dir);
    let bytes = std::fs::read(&model_path).map_err(|_| {
        Error::Config(format!(
            "no trained base model at {}; run `prunekit train --config <cfg> --out {}` first",
            model_path.display(),
            opts.out_dir.display()
        ))
    })?;
    let base = deserialize(&bytes)?;
    let (train_ds, test_ds) = load_data(cfg, opts.seed)?;
    if base.spec.input_dim != train_ds.dim {
        return Err(Error::Config(format!(
            "base model expects {} features, dataset has {}",
            base.spec.input_dim, train_ds.dim
        )));
    }
    if cfg.runs.is_empty() {
        return Err(Error::Config("config has no runs".into()));
    }

    struct Job {
        run: RunConfig,
        seed: u64,
    }
    let mut jobs = Vec::new();
    for r in &cfg.runs {
        for &seed in &r.seeds {
            jobs.push(Job {
                run: r.clone(),
                seed,
            });
        }
    }
    let base_ref = &base;
    let train_ref = &train_ds;
    let test_ref = &test_ds;
    run_jobs(jobs, opts.threads, |job| {
        let schedule = job.run.schedule(job.seed, cfg.target_fpr)?;
        let trace = prune_finetune_loop(base_ref, &schedule, train_ref, test_ref)?;
        let trace_path = opts
            .out_dir
            .join("traces")
            .join(format!("{}__seed{}.csv", job.run.name, job.seed));
        write_text(&trace_path, &trace.to_csv())?;
        if let Some(err) = &trace.error {
            eprintln!("warning: trace {}__seed{} truncated: {err}", job.run.name, job.seed);
        }
        if trace.rows.iter().any(|r| r.vshape.is_some()) {
            let mut s = String::from(
                "round,corr_raw,corr_abs,n_params,fraction_nonneg_mean,degenerate\n",
            );
            for row in &trace.rows {
                if let Some(v) = &row.vshape {
                    s.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        row.round,
                        v.corr_raw,
                        v.corr_abs,
                        v.n_params,
                        v.fraction_nonneg_mean,
                        v.degenerate
                    ));
                }
            }
            let vshape_path = opts
                .out_dir
                .join("vshape")
                .join(format!("{}__seed{}.csv", job.run.name, job.seed));
            write_text(&vshape_path, &s)?;
        }
        Ok(())
    })
}

/// Quantizes a serialized model to f16, writing the quantized file and a
/// comparison table of sizes and metrics at both precisions.
pub fn cmd_quantize(cfg: &ExperimentConfig, opts: &CliOptions, model_path: &Path) -> Result<()> {
    let bytes =
        std::fs::read(model_path).map_err(|e| Error::Io(format!("{}: {e}", model_path.display())))?;
    let model = deserialize(&bytes)?;
    let (_, test_ds) = load_data(cfg, opts.seed)?;
    let enc16 = serialize(&model, StoragePrecision::F16);
    if enc16.f16_overflows > 0 {
        eprintln!(
            "warning: {} parameters overflowed to infinity in f16",
            enc16.f16_overflows
        );
    }
    let stem = model_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model");
    let out_path = opts.out_dir.join(format!("{stem}_f16.pkm"));
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&out_path, &enc16.bytes)
        .map_err(|e| Error::Io(format!("{}: {e}", out_path.display())))?;

    let s32 = measure_sizes(&model, StoragePrecision::F32);
    let s16 = measure_sizes(&model, StoragePrecision::F16);
    let batch = test_ds.as_batch();
    let m32 = evaluate(&model, &batch, cfg.target_fpr, Precision::F32)?;
    let (m16, _) = evaluate_quantized(&model, &batch, cfg.target_fpr, Precision::F32)?;
    let mut table = String::from("precision,raw_bytes,zip_bytes,params,auc,tpr_at_fpr,loss\n");
    table.push_str(&format!(
        "f32,{},{},{},{},{},{}\n",
        s32.raw_bytes, s32.zip_bytes, s32.param_count, m32.auc, m32.tpr_at_fpr, m32.mean_loss
    ));
    table.push_str(&format!(
        "f16,{},{},{},{},{},{}\n",
        s16.raw_bytes, s16.zip_bytes, s16.param_count, m16.auc, m16.tpr_at_fpr, m16.mean_loss
    ));
    table.push_str(&format!(
        "delta,{},{},0,{},{},{}\n",
        s16.raw_bytes as i64 - s32.raw_bytes as i64,
        s16.zip_bytes as i64 - s32.zip_bytes as i64,
        m16.auc - m32.auc,
        m16.tpr_at_fpr - m32.tpr_at_fpr,
        m16.mean_loss - m32.mean_loss
    ));
    write_text(&opts.out_dir.join("quantize_report.csv"), &table)?;
    Ok(())
}

/// One observation in the joined long-format table.
#[derive(Debug, Clone)]
pub struct LongRow {
    pub source: &'static str,
    pub level: String,
    pub method: String,
    pub name: String,
    pub seed: u64,
    /// None for from-scratch models.
    pub round: Option<usize>,
    pub params: usize,
    pub raw_bytes: usize,
    pub zip_bytes: usize,
    pub zip_reduction_pct: f64,
    pub auc: f64,
    pub tpr_at_fpr: f64,
    pub loss: f64,
}

/// Joined and aggregated results of `cmd_report`.
#[derive(Debug, Clone)]
pub struct ReportData {
    pub baseline_zip_bytes: usize,
    pub rows: Vec<LongRow>,
    pub written: Vec<PathBuf>,
}

fn parse_usize(field: &str, what: &str) -> Result<usize> {
    field
        .parse()
        .map_err(|_| Error::Config(format!("bad {what} `{field}` in trace")))
}

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .parse()
        .map_err(|_| Error::Config(format!("bad {what} `{field}` in trace")))
}

fn read_trace_file(path: &Path) -> Result<Vec<LongRow>> {
    let file_name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Config(format!("bad trace filename {}", path.display())))?;
    let (name, seed) = file_name.rsplit_once("__seed").ok_or_else(|| {
        Error::Config(format!("trace filename {} lacks __seed suffix", path.display()))
    })?;
    let seed: u64 = seed
        .parse()
        .map_err(|_| Error::Config(format!("bad seed in {}", path.display())))?;
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(Error::Config(format!(
                "{} line {}: expected 10 columns",
                path.display(),
                i + 1
            )));
        }
        rows.push(LongRow {
            source: "prune",
            level: f[2].to_string(),
            method: f[1].to_string(),
            name: name.to_string(),
            seed,
            round: Some(parse_usize(f[0], "round")?),
            params: parse_usize(f[3], "params")?,
            raw_bytes: parse_usize(f[5], "raw_bytes")?,
            zip_bytes: parse_usize(f[6], "zip_bytes")?,
            zip_reduction_pct: 0.0,
            auc: parse_f64(f[7], "auc")?,
            tpr_at_fpr: parse_f64(f[8], "tpr_at_fpr")?,
            loss: parse_f64(f[9], "loss")?,
        });
    }
    Ok(rows)
}

fn read_scratch_file(path: &Path) -> Result<Vec<LongRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(Error::Config(format!(
                "{} line {}: expected 11 columns",
                path.display(),
                i + 1
            )));
        }
        rows.push(LongRow {
            source: "scratch",
            level: f[2].to_string(),
            method: format!("scratch:{}", f[0]),
            name: f[0].to_string(),
            seed: parse_usize(f[4], "seed")? as u64,
            round: None,
            params: parse_usize(f[5], "params")?,
            raw_bytes: parse_usize(f[6], "raw_bytes")?,
            zip_bytes: parse_usize(f[7], "zip_bytes")?,
            zip_reduction_pct: 0.0,
            auc: parse_f64(f[8], "auc")?,
            tpr_at_fpr: parse_f64(f[9], "tpr_at_fpr")?,
            loss: parse_f64(f[10], "loss")?,
        });
    }
    Ok(rows)
}

/// Joins every trace (plus any from-scratch metrics) under `out_dir`,
/// computes the percent-zip-reduction axis against the common baseline, and
/// writes the four per-figure aggregate tables plus one tidy long table.
pub fn cmd_report(out_dir: &Path) -> Result<ReportData> {
    let traces_dir = out_dir.join("traces");
    let mut trace_files: Vec<PathBuf> = std::fs::read_dir(&traces_dir)
        .map_err(|_| Error::Config(format!("no traces directory at {}", traces_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    trace_files.sort();
    if trace_files.is_empty() {
        return Err(Error::Config("no trace files to report on".into()));
    }
    let mut rows = Vec::new();
    for f in &trace_files {
        rows.extend(read_trace_file(f)?);
    }
    // every trace must start from the same serialized baseline
    let mut baseline: Option<usize> = None;
    for r in rows.iter().filter(|r| r.round == Some(0)) {
        match baseline {
            None => baseline = Some(r.zip_bytes),
            Some(b) if b != r.zip_bytes => {
                return Err(Error::Config(format!(
                    "inconsistent baselines across traces: {} vs {} zip bytes",
                    b, r.zip_bytes
                )))
            }
            _ => {}
        }
    }
    let baseline = baseline.ok_or_else(|| Error::Config("traces lack round-0 rows".into()))?;

    let scratch_path = out_dir.join("scratch_metrics.csv");
    if scratch_path.exists() {
        rows.extend(read_scratch_file(&scratch_path)?);
    }
    for r in rows.iter_mut() {
        r.zip_reduction_pct = 100.0 * (1.0 - r.zip_bytes as f64 / baseline as f64);
    }

    let mut written = Vec::new();
    let mut long = String::from(
        "source,level,method,name,seed,round,params,raw_bytes,zip_bytes,zip_reduction_pct,auc,tpr_at_fpr,loss\n",
    );
    for r in &rows {
        long.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.source,
            r.level,
            r.method,
            r.name,
            r.seed,
            r.round.map(|x| x.to_string()).unwrap_or_default(),
            r.params,
            r.raw_bytes,
            r.zip_bytes,
            r.zip_reduction_pct,
            r.auc,
            r.tpr_at_fpr,
            r.loss
        ));
    }
    let long_path = out_dir.join("report_long.csv");
    write_text(&long_path, &long)?;
    written.push(long_path);

    for level in ["parameter", "neuron"] {
        for metric in ["auc", "tpr_at_fpr"] {
            let mut table = String::from(
                "method,round,zip_reduction_pct_mean,zip_reduction_pct_min,zip_reduction_pct_max,value_mean,value_min,value_max,n_seeds\n",
            );
            // (method, round) -> per-seed observations
            let mut groups: BTreeMap<(String, Option<usize>), Vec<(f64, f64)>> = BTreeMap::new();
            for r in rows.iter().filter(|r| r.level == level) {
                let value = if metric == "auc" { r.auc } else { r.tpr_at_fpr };
                groups
                    .entry((r.method.clone(), r.round))
                    .or_default()
                    .push((r.zip_reduction_pct, value));
            }
            for ((method, round), obs) in groups {
                let n = obs.len() as f64;
                let (mut pm, mut pmin, mut pmax) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
                let (mut vm, mut vmin, mut vmax) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
                for (p, v) in &obs {
                    pm += p;
                    vm += v;
                    pmin = pmin.min(*p);
                    pmax = pmax.max(*p);
                    vmin = vmin.min(*v);
                    vmax = vmax.max(*v);
                }
                table.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    method,
                    round.map(|x| x.to_string()).unwrap_or_default(),
                    pm / n,
                    pmin,
                    pmax,
                    vm / n,
                    vmin,
                    vmax,
                    obs.len()
                ));
            }
            let path = out_dir.join(format!("report_{level}_{metric}.csv"));
            write_text(&path, &table)?;
            written.push(path);
        }
    }
    Ok(ReportData {
        baseline_zip_bytes: baseline,
        rows,
        written,
    })
}

/// Runs jobs across up to `threads` workers, stopping at the first error.
fn run_jobs<T, F>(jobs: Vec<T>, threads: usize, f: F) -> Result<()>
where
    T: Send,
    F: Fn(T) -> Result<()> + Sync,
{
    if threads <= 1 {
        for j in jobs {
            f(j)?;
        }
        return Ok(());
    }
    let queue = Mutex::new(std::collections::VecDeque::from(jobs));
    let errors: Mutex<Vec<Error>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let job = queue.lock().unwrap().pop_front();
                match job {
                    Some(j) => {
                        if let Err(e) = f(j) {
                            errors.lock().unwrap().push(e);
                            return;
                        }
                    }
                    None => return,
                }
            });
        }
    });
    match errors.into_inner().unwrap().into_iter().next() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Convenience used by tests and the quantize path: load + deserialize.
pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    deserialize(&bytes)
}

/// Spec resolution shared with tests.
pub fn resolve_model_spec(cfg: &ExperimentConfig, feature_dim: usize) -> Result<ModelSpec> {
    cfg.resolve_spec(feature_dim)
}
