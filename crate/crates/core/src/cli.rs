//! Command-line front end. Every subcommand writes only inside its `--out`
//! directory and starts by writing `manifest.json` there.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint::load_checkpoint;
use crate::checks::{bench_attention, gradient_suite};
use crate::data::{self, generate_cases, generate_dataset, load_dataset, split, PhantomSpec};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::{Model, ModelConfig};
use crate::training::{self, ablation_registry, find_variant, run_ablation, summarize_ablation, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(
    name = "nestedformer",
    version,
    about = "Multi-modal volumetric segmentation toolkit"
)]
struct Cli {
    /// Worker threads for data generation and evaluation [env: NF_THREADS]
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom dataset
    Gen(GenArgs),
    /// Train a model on a dataset directory
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory
    Eval(EvalArgs),
    /// Finite-difference gradient checks of every block
    Gradcheck(GradcheckArgs),
    /// Compare full and tri-oriented attention costs
    BenchAttn(BenchArgs),
    /// Train the ablation variants and rank them by validation Dice
    Ablate(AblateArgs),
    /// Merge JSONL logs and CSV reports into plot-ready CSV
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Phantom spec JSON (defaults used when omitted)
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    cases: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory with case_* subdirectories
    #[arg(long)]
    data: PathBuf,
    /// Model config JSON; defaults to the toy preset matched to the data
    #[arg(long)]
    model: Option<PathBuf>,
    /// Training config JSON
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of cases held out for validation
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Expected model config; a mismatch with the checkpoint is an error
    #[arg(long)]
    model: Option<PathBuf>,
    /// Load even if the checkpoint config differs from --model
    #[arg(long)]
    force_config: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Only "toy" is supported
    #[arg(long, default_value = "toy")]
    scale: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Token grid "d,h,w"; repeat for a sweep
    #[arg(long, value_parser = parse_triple, default_values = ["8,8,8"])]
    grid: Vec<[usize; 3]>,
    #[arg(long, value_parser = parse_triple, default_value = "2,2,2")]
    window: [usize; 3],
    /// Per-head feature width
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, default_value_t = 20)]
    cases: usize,
    #[arg(long, default_value_t = 32)]
    extent: usize,
    #[arg(long, default_value_t = 2)]
    modalities: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.25)]
    val_fraction: f64,
    /// Variant names (default: all registered)
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    #[arg(long, default_value_t = 1234)]
    data_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// JSONL training logs and CSV reports to merge
    #[arg(long, required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_triple(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("'{p}': {e}")))
        .collect::<std::result::Result<_, _>>()?;
    <[usize; 3]>::try_from(v).map_err(|_| format!("expected three comma-separated integers, got '{s}'"))
}

/// Everything needed to reproduce a run; written before work starts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub version: String,
    pub threads: usize,
}

fn write_manifest(out: &Path, command: &str, config: serde_json::Value, seed: u64, artifacts: &[&str]) -> Result<()> {
    fs::create_dir_all(out)?;
    let m = RunManifest {
        command: command.into(),
        config,
        seed,
        artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
        version: env!("CARGO_PKG_VERSION").into(),
        threads: rayon::current_num_threads(),
    };
    fs::write(out.join(MANIFEST_FILE), serde_json::to_vec_pretty(&m)?)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn io_error(path: &Path, e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::NotFound {
        Error::Validation(format!("{}: file not found", path.display()))
    } else {
        Error::Io(e)
    }
}

fn init_threads(threads: Option<usize>) -> Result<()> {
    let n = match threads {
        Some(n) => Some(n),
        None => match std::env::var("NF_THREADS") {
            Ok(v) => Some(
                v.parse()
                    .map_err(|_| Error::Validation(format!("NF_THREADS: '{v}' is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Validation("--threads must be >= 1".into()));
        }
        // Ignore "already initialized": only the first call in a process wins.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parse `args` (including the program name) and run; returns the exit code:
/// 0 success, 1 invalid input, 2 runtime failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if cli.verbose {
        let _ = env_logger::Builder::from_default_env()
            .filter_level(log::LevelFilter::Info)
            .try_init();
    } else {
        let _ = env_logger::try_init();
    }
    match init_threads(cli.threads).and_then(|_| dispatch(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::BenchAttn(a) => cmd_bench(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn cmd_gen(a: GenArgs) -> Result<i32> {
    let mut spec: PhantomSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => PhantomSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let config = serde_json::json!({ "spec": spec, "cases": a.cases });
    write_manifest(
        &a.out,
        "gen",
        config,
        spec.seed,
        &["case_*/volume.mmv", "case_*/mask.msk", "case_*/meta.json"],
    )?;
    generate_dataset(&a.out, &spec, a.cases)?;
    println!("wrote {} cases to {}", a.cases, a.out.display());
    Ok(0)
}

/// Toy preset matched to a dataset's modalities, classes and extents.
fn model_for(path: Option<&Path>, cases: &[data::Case]) -> Result<ModelConfig> {
    let first = &cases[0];
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => ModelConfig::toy(first.volume.modalities(), first.mask.classes(), first.volume.extents()),
    };
    if cfg.modalities != first.volume.modalities()
        || cfg.classes != first.mask.classes()
        || cfg.extents != first.volume.extents()
    {
        return Err(Error::Config(format!(
            "model (modalities {}, classes {}, extents {:?}) does not match the data ({}, {}, {:?})",
            cfg.modalities,
            cfg.classes,
            cfg.extents,
            first.volume.modalities(),
            first.mask.classes(),
            first.volume.extents()
        )));
    }
    Ok(cfg)
}

fn normalized(cases: Vec<data::Case>) -> Vec<data::Case> {
    cases
        .into_iter()
        .map(|c| data::Case {
            volume: data::normalize(&c.volume),
            ..c
        })
        .collect()
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let cases = normalized(load_dataset(&a.data)?);
    let mut model_cfg = model_for(a.model.as_deref(), &cases)?;
    let mut tc: TrainConfig = match &a.train {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.steps {
        tc.steps = s;
    }
    if let Some(lr) = a.lr {
        tc.lr = lr;
    }
    if let Some(seed) = a.seed {
        tc.seed = seed;
        model_cfg.seed = seed;
    }
    tc.validate()?;
    model_cfg.validate()?;
    let vf = a.val_fraction;
    let parts = split(cases.len(), [1.0 - vf, vf, 0.0], tc.seed)?;
    let config = serde_json::json!({
        "model": model_cfg, "train": tc, "data": a.data, "val_fraction": vf, "split": parts,
    });
    write_manifest(
        &a.out,
        "train",
        config,
        tc.seed,
        &[training::LOG_FILE, training::VAL_FILE, training::FINAL_CHECKPOINT],
    )?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| cases[i].clone()).collect::<Vec<_>>();
    let (train_set, val_set) = (pick(&parts.train), pick(&parts.val));
    let model = Model::build(model_cfg)?;
    info!(
        "training {} parameters on {} cases",
        model.params.count(),
        train_set.len()
    );
    let outcome = training::train(model, &tc, &train_set, &val_set, Some(&a.out))?;
    let last = outcome.log.last().expect("steps >= 1");
    println!("final loss {:.6} after {} steps", last.loss, last.step);
    if let Some(v) = outcome.validation.last() {
        println!("validation Dice {:.4}", v.val_dice);
    }
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let expected: Option<ModelConfig> = a.model.as_deref().map(read_json).transpose()?;
    let config = serde_json::json!({
        "checkpoint": a.checkpoint, "data": a.data, "model": expected, "force_config": a.force_config,
    });
    write_manifest(&a.out, "eval", config, 0, &["report.csv", "report.json"])?;
    if !a.checkpoint.exists() {
        return Err(Error::Validation(format!("{}: file not found", a.checkpoint.display())));
    }
    let ck = load_checkpoint(&a.checkpoint, expected.as_ref(), a.force_config)?;
    let cases = normalized(load_dataset(&a.data)?);
    let report = evaluate(&ck.model, &cases)?;
    report.write_csv(&a.out.join("report.csv"))?;
    report.write_json(&a.out.join("report.json"))?;
    println!("mean Dice {:.4} over {} cases", report.mean_dice, report.cases);
    Ok(0)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    if a.scale != "toy" {
        return Err(Error::Validation(format!(
            "--scale: unsupported value '{}' (expected 'toy')",
            a.scale
        )));
    }
    write_manifest(
        &a.out,
        "gradcheck",
        serde_json::json!({ "scale": a.scale }),
        a.seed,
        &["gradcheck.csv"],
    )?;
    let rows = gradient_suite(a.seed)?;
    let mut w = csv::Writer::from_path(a.out.join("gradcheck.csv"))?;
    w.write_record(["block", "shape", "max_rel_error", "entries", "result"])?;
    println!("{:<20} {:<40} {:>12}  result", "block", "shape", "max_rel_err");
    for r in &rows {
        let res = if r.pass { "pass" } else { "FAIL" };
        println!("{:<20} {:<40} {:>12.3e}  {res}", r.block, r.shape, r.max_rel_error);
        w.write_record([
            r.block.clone(),
            r.shape.clone(),
            format!("{:e}", r.max_rel_error),
            r.entries.to_string(),
            res.into(),
        ])?;
    }
    w.flush()?;
    Ok(if rows.iter().all(|r| r.pass) { 0 } else { 2 })
}

fn fmt_triple(t: [usize; 3]) -> String {
    format!("{}x{}x{}", t[0], t[1], t[2])
}

fn cmd_bench(a: BenchArgs) -> Result<i32> {
    let config = serde_json::json!({ "grid": a.grid, "window": a.window, "dim": a.dim, "reps": a.reps });
    write_manifest(&a.out, "bench-attn", config, a.seed, &["bench_attn.csv"])?;
    let mut w = csv::Writer::from_path(a.out.join("bench_attn.csv"))?;
    let header = [
        "grid",
        "window",
        "full",
        "tsa",
        "full_counted",
        "tsa_counted",
        "full_ms",
        "tsa_ms",
    ];
    w.write_record(header)?;
    println!("{}", header.join(","));
    for &grid in &a.grid {
        let r = bench_attention(grid, a.window, a.dim, a.reps, a.seed)?;
        let rec = [
            fmt_triple(r.grid),
            fmt_triple(r.window),
            r.full.to_string(),
            r.tsa.to_string(),
            r.full_counted.to_string(),
            r.tsa_counted.to_string(),
            format!("{:.3}", r.full_ms),
            format!("{:.3}", r.tsa_ms),
        ];
        println!("{}", rec.join(","));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(0)
}

fn cmd_ablate(a: AblateArgs) -> Result<i32> {
    let variants = if a.variants.is_empty() {
        ablation_registry()
    } else {
        a.variants.iter().map(|n| find_variant(n)).collect::<Result<_>>()?
    };
    if a.seeds.is_empty() {
        return Err(Error::Validation("--seeds must list at least one seed".into()));
    }
    let spec = PhantomSpec {
        extents: [a.extent; 3],
        modalities: a.modalities,
        classes: a.classes,
        seed: a.data_seed,
        ..PhantomSpec::default()
    };
    spec.validate()?;
    let base = ModelConfig::toy(a.modalities, a.classes, [a.extent; 3]);
    let tc = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        record_wall_time: false,
        ..TrainConfig::default()
    };
    tc.validate()?;
    let config = serde_json::json!({
        "spec": spec, "cases": a.cases, "model": base, "train": tc, "seeds": a.seeds,
        "val_fraction": a.val_fraction, "variants": variants,
    });
    write_manifest(
        &a.out,
        "ablate",
        config,
        a.data_seed,
        &["ablation.csv", "ablation_ranked.csv"],
    )?;
    let cases = normalized(generate_cases(&spec, a.cases)?);
    let parts = split(cases.len(), [1.0 - a.val_fraction, a.val_fraction, 0.0], a.data_seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| cases[i].clone()).collect::<Vec<_>>();
    let results = run_ablation(&base, &tc, &variants, &a.seeds, &pick(&parts.train), &pick(&parts.val))?;

    let mut w = csv::Writer::from_path(a.out.join("ablation.csv"))?;
    w.write_record(["variant", "seed", "val_dice"])?;
    for r in &results {
        w.write_record([r.variant.clone(), r.seed.to_string(), r.val_dice.to_string()])?;
    }
    w.flush()?;
    let mut ranked = summarize_ablation(&variants, &results);
    ranked.sort_by(|x, y| y.1.total_cmp(&x.1));
    let mut w = csv::Writer::from_path(a.out.join("ablation_ranked.csv"))?;
    w.write_record(["rank", "variant", "mean_val_dice"])?;
    for (i, (name, d)) in ranked.iter().enumerate() {
        println!("{:>2}. {name:<24} {d:.4}", i + 1);
        w.write_record([(i + 1).to_string(), name.clone(), d.to_string()])?;
    }
    w.flush()?;
    Ok(0)
}

fn cmd_report(a: ReportArgs) -> Result<i32> {
    let config = serde_json::json!({ "inputs": a.inputs });
    write_manifest(&a.out, "report", config, 0, &["curves.csv", "tables.csv"])?;
    let mut curves = csv::Writer::from_path(a.out.join("curves.csv"))?;
    curves.write_record(["source", "step", "loss", "dice_loss", "ce_loss", "lr", "wall_ms"])?;
    let mut tables = csv::Writer::from_path(a.out.join("tables.csv"))?;
    tables.write_record(["source", "row", "column", "value"])?;
    for path in &a.inputs {
        let src = path.display().to_string();
        let file = fs::File::open(path).map_err(|e| io_error(path, e))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => {
                for (i, line) in BufReader::new(file).lines().enumerate() {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let r: training::StepRecord =
                        serde_json::from_str(&line).map_err(|e| Error::Validation(format!("{src}:{}: {e}", i + 1)))?;
                    curves.write_record([
                        src.clone(),
                        r.step.to_string(),
                        r.loss.to_string(),
                        r.dice_loss.to_string(),
                        r.ce_loss.to_string(),
                        r.lr.to_string(),
                        r.wall_ms.to_string(),
                    ])?;
                }
            }
            Some("csv") => {
                // Long format keeps heterogeneous tables in one file.
                let mut rd = csv::Reader::from_reader(file);
                let header = rd.headers()?.clone();
                for (i, rec) in rd.records().enumerate() {
                    let rec = rec?;
                    for (col, val) in header.iter().zip(rec.iter()) {
                        tables.write_record([src.as_str(), &i.to_string(), col, val])?;
                    }
                }
            }
            _ => {
                return Err(Error::Validation(format!("{src}: expected a .jsonl or .csv input")));
            }
        }
    }
    curves.flush()?;
    tables.flush()?;
    println!("wrote curves.csv and tables.csv to {}", a.out.display());
    Ok(0)
}
