//! `nearquery` — deterministic phantom-segmentation workbench.
//!
//! Subcommands: gen-data, train, eval, ablate, gradcheck, sample-stats.
//! Every configuration field can be set by its dotted path
//! (`--model.offset.strategy squash_scaled`); kernel parallelism is capped
//! by `NEARQUERY_THREADS` (0 or 1 = sequential, results identical).

mod config;
mod report;

use config::{resolve, to_pretty_json, ConfigError, RunConfig};
use nearquery_core::ablate::{ablate, default_grid, GridEntry};
use nearquery_core::deform::{sampling_spread_stats, OffsetAdjustConfig, OffsetStrategy, SquashKind};
use nearquery_core::metrics::MetricsReport;
use nearquery_core::model::Model;
use nearquery_core::phantom::{gen_phantom, DatasetManifest};
use nearquery_core::train::{evaluate_model, load_dataset, train};
use nearquery_core::verify::{gradcheck_suite, GRADCHECK_TOL};
use nearquery_core::ParamStore;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const USAGE: &str = "\
nearquery — deterministic phantom-segmentation workbench

USAGE:
  nearquery <subcommand> [--flag value ...]

SUBCOMMANDS:
  gen-data      generate a phantom dataset       (--out DIR [--n N] [--seed S] [--size PX])
  train         train a model                    (--data DIR --out DIR)
  eval          evaluate a checkpoint            (--data DIR --checkpoint FILE --out DIR [--format csv|json|both])
  ablate        run an ablation grid             (--data DIR --out DIR [--grid default|FILE])
  gradcheck     finite-difference gradient check (--tol T --seed S [--skip-model true])
  sample-stats  offset-spread statistics CSV     (--out FILE [--sigma S] [--draws N] [--seed S] [--levels L])

COMMON FLAGS:
  --config FILE             load a JSON config before applying overrides
  --<dotted.path> VALUE     override any config field, e.g. --model.offset.strategy squash_scaled
  --help                    this text

Each run with --out echoes its effective configuration to
<out>/config.resolved.json; re-feeding that file via --config reproduces the
run exactly.
";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            if !msg.is_empty() {
                eprintln!("error: {msg}");
            }
            eprintln!("{USAGE}");
            ExitCode::from(2)
        }
        Err(CliError::Failed(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

enum CliError {
    /// Unknown subcommand or flag: usage text, exit 2.
    Usage(String),
    /// Validation or runtime failure: single-line error, exit 1.
    Failed(String),
}

impl From<nearquery_core::Error> for CliError {
    fn from(e: nearquery_core::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::UnknownKey(k) => CliError::Usage(format!("unknown configuration key: {k}")),
            ConfigError::Invalid(m) => CliError::Failed(m),
        }
    }
}

/// Parsed command line: plumbing flags (consumed by the subcommand) and
/// config overrides (dotted paths).
struct Parsed {
    flags: BTreeMap<String, String>,
    overrides: Vec<(String, String)>,
}

fn parse_flags(args: &[String], plumbing: &[&str]) -> Result<Parsed, CliError> {
    let mut flags = BTreeMap::new();
    let mut overrides = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        if arg == "--help" || arg == "-h" {
            return Err(CliError::Usage(String::new()));
        }
        let Some(stripped) = arg.strip_prefix("--") else {
            return Err(CliError::Usage(format!("unexpected argument: {arg}")));
        };
        let (key, value) = match stripped.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let Some(v) = args.get(i + 1) else {
                    return Err(CliError::Usage(format!("flag --{stripped} needs a value")));
                };
                i += 1;
                (stripped.to_string(), v.clone())
            }
        };
        if plumbing.contains(&key.as_str()) {
            flags.insert(key, value);
        } else {
            overrides.push((key, value));
        }
        i += 1;
    }
    Ok(Parsed { flags, overrides })
}

fn write_resolved(cfg: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Failed(e.to_string()))?;
    std::fs::write(out_dir.join("config.resolved.json"), to_pretty_json(cfg))
        .map_err(|e| CliError::Failed(e.to_string()))?;
    Ok(())
}

fn required(flags: &BTreeMap<String, String>, key: &str) -> Result<PathBuf, CliError> {
    flags
        .get(key)
        .map(PathBuf::from)
        .ok_or_else(|| CliError::Usage(format!("missing required flag --{key}")))
}

fn run(args: Vec<String>) -> Result<(), CliError> {
    let Some(sub) = args.first() else {
        return Err(CliError::Usage(String::new()));
    };
    let rest = &args[1..];
    match sub.as_str() {
        "gen-data" => cmd_gen_data(rest),
        "train" => cmd_train(rest),
        "eval" => cmd_eval(rest),
        "ablate" => cmd_ablate(rest),
        "gradcheck" => cmd_gradcheck(rest),
        "sample-stats" => cmd_sample_stats(rest),
        other => Err(CliError::Usage(format!("unknown subcommand: {other}"))),
    }
}

fn cmd_gen_data(args: &[String]) -> Result<(), CliError> {
    let mut p = parse_flags(args, &["out", "config", "n", "seed", "size"])?;
    for (flag, path) in [("n", "phantom.count"), ("seed", "phantom.seed"), ("size", "phantom.size")] {
        if let Some(v) = p.flags.get(flag) {
            p.overrides.push((path.to_string(), v.clone()));
        }
    }
    let cfg = resolve(p.flags.get("config").map(|s| s.as_str()), &p.overrides)?;
    let out = required(&p.flags, "out")?;
    let manifest = gen_phantom(&cfg.phantom, &out)?;
    write_resolved(&cfg, &out)?;
    println!(
        "wrote {} samples ({} classes) to {}",
        manifest.samples.len(),
        manifest.classes.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(args: &[String]) -> Result<(), CliError> {
    let mut p = parse_flags(args, &["data", "out", "config", "seed", "steps"])?;
    for (flag, path) in [("seed", "seed"), ("steps", "steps")] {
        if let Some(v) = p.flags.get(flag) {
            p.overrides.push((path.to_string(), v.clone()));
        }
    }
    let cfg = resolve(p.flags.get("config").map(|s| s.as_str()), &p.overrides)?;
    let data = required(&p.flags, "data")?;
    let out = required(&p.flags, "out")?;
    write_resolved(&cfg, &out)?;
    let outcome = train(&cfg.train_config(), &data, &out)?;
    println!("trained {} steps: mDice={}", cfg.steps, outcome.final_mdice);
    println!("checkpoint: {}", outcome.checkpoint.display());
    println!("log: {}", outcome.log.display());
    Ok(())
}

fn emit_metrics(report: &MetricsReport, out: &Path, format: &str) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Failed(e.to_string()))?;
    let mut written = Vec::new();
    if format == "csv" || format == "both" {
        let path = out.join("metrics.csv");
        std::fs::write(&path, report::report_to_csv(report)).map_err(|e| CliError::Failed(e.to_string()))?;
        written.push(path);
    }
    if format == "json" || format == "both" {
        let path = out.join("metrics.json");
        std::fs::write(&path, report::report_to_json(report)).map_err(|e| CliError::Failed(e.to_string()))?;
        written.push(path);
    }
    if written.is_empty() {
        return Err(CliError::Usage(format!("unknown --format {format} (csv|json|both)")));
    }
    Ok(written)
}

fn cmd_eval(args: &[String]) -> Result<(), CliError> {
    let p = parse_flags(args, &["data", "out", "config", "checkpoint", "format"])?;
    let cfg = resolve(p.flags.get("config").map(|s| s.as_str()), &p.overrides)?;
    let data = required(&p.flags, "data")?;
    let ckpt = required(&p.flags, "checkpoint")?;
    let out = required(&p.flags, "out")?;
    let format = p.flags.get("format").map(|s| s.as_str()).unwrap_or("both").to_string();

    let manifest = DatasetManifest::load(&data)?;
    let mut store = ParamStore::<f32>::new();
    let model = Model::build(&cfg.model, &mut store, cfg.seed)?;
    nearquery_core::checkpoint::load_into(&ckpt, &mut store, None)?;
    let samples = load_dataset(&data, &manifest, cfg.preprocess_trick, cfg.model.n_classes)?;
    let report = evaluate_model(&model, &store, &samples, &manifest)?;
    write_resolved(&cfg, &out)?;
    let files = emit_metrics(&report, &out, &format)?;
    print!("{}", report::summary_lines(&report));
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_ablate(args: &[String]) -> Result<(), CliError> {
    let p = parse_flags(args, &["data", "out", "config", "grid", "seed", "steps"])?;
    let mut overrides = p.overrides.clone();
    for (flag, path) in [("seed", "seed"), ("steps", "steps")] {
        if let Some(v) = p.flags.get(flag) {
            overrides.push((path.to_string(), v.clone()));
        }
    }
    let cfg = resolve(p.flags.get("config").map(|s| s.as_str()), &overrides)?;
    let data = required(&p.flags, "data")?;
    let out = required(&p.flags, "out")?;
    let grid: Vec<GridEntry> = match p.flags.get("grid").map(|s| s.as_str()).unwrap_or("default") {
        "default" => default_grid(),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Failed(format!("grid {path}: {e}")))?;
            serde_json::from_str(&text).map_err(|e| CliError::Failed(format!("grid {path}: {e}")))?
        }
    };
    write_resolved(&cfg, &out)?;
    let outcome = ablate(&cfg.train_config(), &data, &out, &grid)?;
    for row in &outcome.rows {
        println!(
            "{}: mDice={} mAcc={} mDice_small={} ({:.1}s)",
            row.config, row.m_dice, row.m_acc, row.m_dice_small, row.seconds
        );
    }
    println!("wrote {}", outcome.csv.display());
    println!("wrote {}", outcome.results_csv.display());
    Ok(())
}

fn cmd_gradcheck(args: &[String]) -> Result<(), CliError> {
    let p = parse_flags(args, &["tol", "seed", "skip-model"])?;
    if !p.overrides.is_empty() {
        return Err(CliError::Usage(format!("unknown flag: --{}", p.overrides[0].0)));
    }
    let tol: f64 = match p.flags.get("tol") {
        Some(v) => v.parse().map_err(|_| CliError::Failed(format!("bad --tol {v}")))?,
        None => GRADCHECK_TOL,
    };
    let seed: u64 = match p.flags.get("seed") {
        Some(v) => v.parse().map_err(|_| CliError::Failed(format!("bad --seed {v}")))?,
        None => 0,
    };
    let include_model = p.flags.get("skip-model").map(|v| v != "true").unwrap_or(true);
    let checks = gradcheck_suite(seed, include_model)?;
    let mut worst = 0.0f64;
    let mut failed = 0usize;
    for (name, report) in &checks {
        worst = worst.max(report.max_rel_err);
        let ok = report.max_rel_err <= tol;
        if !ok {
            failed += 1;
        }
        println!(
            "{} {name}: max_rel_err={}{}",
            if ok { "ok  " } else { "FAIL" },
            report.max_rel_err,
            if report.params.iter().any(|p| p.disconnected) { " (disconnected params flagged)" } else { "" }
        );
    }
    if failed == 0 {
        println!("PASS max_rel_err={worst}");
        Ok(())
    } else {
        println!("FAIL max_rel_err={worst} failed_checks={failed}");
        Err(CliError::Failed(format!("gradcheck: {failed} checks above tol {tol}")))
    }
}

fn cmd_sample_stats(args: &[String]) -> Result<(), CliError> {
    let p = parse_flags(args, &["out", "config", "sigma", "draws", "seed", "levels", "points"])?;
    let cfg = resolve(p.flags.get("config").map(|s| s.as_str()), &p.overrides)?;
    let parse = |key: &str, default: f64| -> Result<f64, CliError> {
        match p.flags.get(key) {
            Some(v) => v.parse().map_err(|_| CliError::Failed(format!("bad --{key} {v}"))),
            None => Ok(default),
        }
    };
    let sigma = parse("sigma", 3.0)?;
    let draws = parse("draws", 100_000.0)? as usize;
    let seed = parse("seed", 7.0)? as u64;
    let levels = parse("levels", 3.0)? as usize;
    let points = parse("points", cfg.model.n_points as f64)? as usize;

    let base = cfg.model.offset;
    let strategies = [
        OffsetAdjustConfig { strategy: OffsetStrategy::None, ..base },
        OffsetAdjustConfig { strategy: OffsetStrategy::ClipDivide, ..base },
        OffsetAdjustConfig {
            strategy: OffsetStrategy::SquashScaled,
            squash_kind: SquashKind::SigmoidSymmetric,
            ..base
        },
        OffsetAdjustConfig {
            strategy: OffsetStrategy::SquashScaled,
            squash_kind: SquashKind::SoftmaxSign,
            ..base
        },
    ];
    let mut csv = String::from("level,strategy,mean_norm,median_norm,max_norm,frac_within_1px\n");
    for s in &strategies {
        let report = sampling_spread_stats(s, levels, points, sigma, draws, seed)?;
        for line in report.to_csv().lines().skip(1) {
            csv.push_str(line);
            csv.push('\n');
        }
    }
    match p.flags.get("out") {
        Some(path) => {
            std::fs::write(path, &csv).map_err(|e| CliError::Failed(e.to_string()))?;
            println!("wrote {path}");
        }
        None => print!("{csv}"),
    }
    Ok(())
}
