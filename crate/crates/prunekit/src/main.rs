//! prunekit command line: train / prune / quantize / report.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime or divergence
//! error.

use std::path::PathBuf;
use std::process::ExitCode;

use prunekit::cli::{cmd_prune, cmd_quantize, cmd_report, cmd_train, CliOptions, ExperimentConfig};
use prunekit::compress::StoragePrecision;
use prunekit::error::Error;

const USAGE: &str = "\
prunekit <command> [options]

commands:
  train       train the base model (and any configured scratch variants)
  prune       run every configured prune/fine-tune schedule
  quantize    write an f16 copy of a model plus a size/metric comparison
  report      join traces into plot-ready tradeoff tables

options:
  --config PATH       experiment config (JSON); required by train/prune/quantize
  --out DIR           output directory (default: config output_dir, else `out`)
  --model PATH        model file for quantize (default: <out>/base_model.pkm)
  --seed N            override dataset + training seeds
  --precision P       f32 | f16 storage for written models (default f32)
  --threads N         parallel (run, seed) jobs (default 1)

environment:
  PRUNEKIT_THREADS    default for --threads
  PRUNEKIT_OUT        default for --out
";

struct Args {
    command: String,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    model: Option<PathBuf>,
    seed: Option<u64>,
    precision: StoragePrecision,
    threads: Option<usize>,
}

fn parse_args(argv: &[String]) -> Result<Args, String> {
    if argv.is_empty() {
        return Err("missing command".into());
    }
    let mut args = Args {
        command: argv[0].clone(),
        config: None,
        out: None,
        model: None,
        seed: None,
        precision: StoragePrecision::F32,
        threads: None,
    };
    let mut i = 1;
    while i < argv.len() {
        let flag = argv[i].as_str();
        let mut value = || -> Result<&str, String> {
            i += 1;
            argv.get(i)
                .map(|s| s.as_str())
                .ok_or_else(|| format!("{flag} needs a value"))
        };
        match flag {
            "--config" => args.config = Some(PathBuf::from(value()?)),
            "--out" => args.out = Some(PathBuf::from(value()?)),
            "--model" => args.model = Some(PathBuf::from(value()?)),
            "--seed" => {
                args.seed = Some(value()?.parse().map_err(|_| "--seed needs an integer")?)
            }
            "--precision" => {
                let v = value()?;
                args.precision = StoragePrecision::from_name(v)
                    .ok_or_else(|| format!("--precision must be f32 or f16, got {v}"))?;
            }
            "--threads" => {
                args.threads =
                    Some(value()?.parse().map_err(|_| "--threads needs an integer")?)
            }
            "--help" | "-h" => return Err(String::new()),
            other => return Err(format!("unknown flag {other}")),
        }
        i += 1;
    }
    Ok(args)
}

fn env_usize(name: &str) -> Option<usize> {
    std::env::var(name).ok().and_then(|v| v.parse().ok())
}

fn run(args: Args) -> Result<(), Error> {
    let needs_config = matches!(args.command.as_str(), "train" | "prune" | "quantize");
    let cfg = if needs_config {
        let path = args
            .config
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} requires --config", args.command)))?;
        Some(ExperimentConfig::load(path)?)
    } else {
        None
    };
    let out_dir = args
        .out
        .clone()
        .or_else(|| std::env::var("PRUNEKIT_OUT").ok().map(PathBuf::from))
        .or_else(|| {
            cfg.as_ref()
                .and_then(|c| c.output_dir.clone())
                .map(PathBuf::from)
        })
        .unwrap_or_else(|| PathBuf::from("out"));
    let opts = CliOptions {
        out_dir: out_dir.clone(),
        threads: args
            .threads
            .or_else(|| env_usize("PRUNEKIT_THREADS"))
            .unwrap_or(1)
            .max(1),
        precision: args.precision,
        seed: args.seed,
    };
    match args.command.as_str() {
        "train" => cmd_train(cfg.as_ref().unwrap(), &opts),
        "prune" => cmd_prune(cfg.as_ref().unwrap(), &opts),
        "quantize" => {
            let model_path = args
                .model
                .unwrap_or_else(|| prunekit::cli::base_model_path(&out_dir));
            cmd_quantize(cfg.as_ref().unwrap(), &opts, &model_path)
        }
        "report" => cmd_report(&out_dir).map(|data| {
            for p in &data.written {
                println!("wrote {}", p.display());
            }
        }),
        other => Err(Error::Config(format!("unknown command `{other}`"))),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let args = match parse_args(&argv) {
        Ok(a) => a,
        Err(msg) => {
            if !msg.is_empty() {
                eprintln!("error: {msg}\n");
            }
            eprint!("{USAGE}");
            return ExitCode::from(1);
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
