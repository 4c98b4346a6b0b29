//! `lighthouse` — drivers around the core crate: invariant checks, a
//! dense-vs-pyramid scaling benchmark, and the two-stage toy trainer.
//!
//! Exit status is 0 only when everything requested succeeded (for `check`
//! and `selftest`: every invariant passed).

mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lighthouse_core::checks::{self, CheckResult};
use lighthouse_core::{
    scaling_sweep, sweep_csv, train_dense_baseline, train_two_stage, SelectionVariant,
    SweepSettings, TrainConfig, TrainReport,
};

use config::{parse_list, ConfigMap};
use manifest::{sibling, write_file, Manifest};

#[derive(Parser)]
#[command(
    name = "lighthouse",
    version,
    about = "Pyramid-selected sparse attention: invariant checks, scaling benchmarks, toy training"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the full invariant suite; one PASS/FAIL line per check.
    Check,
    /// Fast gate: the dense-equivalence and gradient oracles only.
    Selftest,
    /// Time dense vs pyramid attention over a range of N and write a CSV.
    Bench(BenchArgs),
    /// Train the toy model (two-stage switch and/or dense baseline).
    Train(TrainArgs),
}

#[derive(Args)]
struct BenchArgs {
    /// Flat `key = value` config file (a previous run's manifest works).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated sequence lengths to sweep.
    #[arg(long)]
    n: Option<String>,
    /// Timing repetitions per point; the lower median is reported.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output stem: writes `<out>.csv` and `<out>.manifest`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat `key = value` config file (a previous run's manifest works).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output stem: writes `<out>_two_stage.csv` / `<out>_baseline.csv` and `<out>.manifest`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run the pyramid-then-dense schedule (the default when neither run flag is given).
    #[arg(long)]
    two_stage: bool,
    /// Run the dense-only baseline with the same total step budget.
    #[arg(long)]
    baseline: bool,
    /// Float width for parameters and activations.
    #[arg(long, value_parser = ["64", "32"])]
    precision: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Check => Ok(run_checks(checks::full_suite())),
        Cmd::Selftest => Ok(run_checks(checks::fast_gate())),
        Cmd::Bench(args) => cmd_bench(&args),
        Cmd::Train(args) => cmd_train(&args),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run_checks(results: Vec<CheckResult>) -> bool {
    let passed = results.iter().filter(|r| r.passed).count();
    for result in &results {
        println!("{}", result.line());
    }
    println!("{passed}/{} checks passed", results.len());
    passed == results.len()
}

#[derive(Clone, Copy, PartialEq)]
enum Precision {
    F64,
    F32,
}

impl Precision {
    fn parse(text: &str) -> Result<Self, String> {
        match text {
            "64" => Ok(Precision::F64),
            "32" => Ok(Precision::F32),
            other => Err(format!("precision must be 64 or 32, got {other:?}")),
        }
    }

    fn label(self) -> &'static str {
        match self {
            Precision::F64 => "64",
            Precision::F32 => "32",
        }
    }
}

fn cmd_bench(args: &BenchArgs) -> Result<bool, String> {
    let mut cfg = match &args.config {
        Some(path) => ConfigMap::load(path)?,
        None => ConfigMap::empty(),
    };
    for key in Manifest::META_KEYS {
        cfg.take_raw(key);
    }

    let mut settings = SweepSettings {
        n_values: vec![1024, 2048, 4096, 8192, 16384],
        head_dim: 32,
        pool_factor: 2,
        budget_k: 32,
        repetitions: 3,
        seed: 7,
    };
    if let Some(ns) = cfg.take_list::<usize>("n")? {
        settings.n_values = ns;
    }
    cfg.take_into("reps", &mut settings.repetitions)?;
    cfg.take_into("head_dim", &mut settings.head_dim)?;
    cfg.take_into("pool_factor", &mut settings.pool_factor)?;
    cfg.take_into("budget_k", &mut settings.budget_k)?;
    cfg.take_into("seed", &mut settings.seed)?;
    let mut stem =
        cfg.take_raw("out").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("sweep"));
    cfg.finish()?;

    if let Some(list) = &args.n {
        settings.n_values = parse_list(list)?;
    }
    if let Some(reps) = args.reps {
        settings.repetitions = reps;
    }
    if let Some(seed) = args.seed {
        settings.seed = seed;
    }
    if let Some(out) = &args.out {
        stem = out.clone();
    }

    let rows = scaling_sweep(&settings).map_err(|e| e.to_string())?;
    for row in &rows {
        println!(
            "{:>7} n={:<7} S={:<7} fwd {:>10.3} ms   fwd+bwd {:>10.3} ms   attention flops {}",
            row.mode, row.n, row.s, row.time_fwd_ms_median, row.time_fwdbwd_ms_median,
            row.flops_attention
        );
    }

    let csv_path = sibling(&stem, ".csv");
    write_file(&csv_path, &sweep_csv(&settings, &rows))?;

    let mut manifest = Manifest::new("bench");
    let ns =
        settings.n_values.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",");
    manifest.push("n", ns);
    manifest.push("reps", settings.repetitions);
    manifest.push("head_dim", settings.head_dim);
    manifest.push("pool_factor", settings.pool_factor);
    manifest.push("budget_k", settings.budget_k);
    manifest.push("seed", settings.seed);
    manifest.push("out", stem.display());
    let manifest_path = manifest.write(&stem, &[csv_path.clone()])?;

    println!("wrote {} and {}", csv_path.display(), manifest_path.display());
    Ok(true)
}

fn parse_variant(text: &str) -> Result<SelectionVariant, String> {
    match text {
        "descent" => Ok(SelectionVariant::HierarchicalDescent),
        "flat" => Ok(SelectionVariant::FlatJoint),
        other => Err(format!("variant must be `descent` or `flat`, got {other:?}")),
    }
}

fn variant_label(variant: SelectionVariant) -> &'static str {
    match variant {
        SelectionVariant::HierarchicalDescent => "descent",
        SelectionVariant::FlatJoint => "flat",
    }
}

fn cmd_train(args: &TrainArgs) -> Result<bool, String> {
    let mut cfg = match &args.config {
        Some(path) => ConfigMap::load(path)?,
        None => ConfigMap::empty(),
    };
    for key in Manifest::META_KEYS {
        cfg.take_raw(key);
    }

    let mut tc = TrainConfig::toy_default();
    cfg.take_into("layers", &mut tc.layers)?;
    cfg.take_into("d_model", &mut tc.d_model)?;
    cfg.take_into("heads", &mut tc.heads)?;
    if let Some(hd) = cfg.take::<usize>("head_dim")? {
        tc.head_dim = hd;
        tc.lighthouse.head_dim = hd;
    }
    cfg.take_into("ffn_dim", &mut tc.ffn_dim)?;
    cfg.take_into("vocab", &mut tc.vocab)?;
    cfg.take_into("alphabet", &mut tc.alphabet)?;
    cfg.take_into("markov_order", &mut tc.markov_order)?;
    cfg.take_into("seq_len", &mut tc.lighthouse.seq_len)?;
    cfg.take_into("pool_factor", &mut tc.lighthouse.pool_factor)?;
    cfg.take_into("levels", &mut tc.lighthouse.levels)?;
    cfg.take_into("budget_k", &mut tc.lighthouse.budget_k)?;
    cfg.take_into("chunk_size", &mut tc.lighthouse.chunk_size)?;
    cfg.take_into("buffer_m", &mut tc.lighthouse.buffer_m)?;
    if let Some(v) = cfg.take_raw("variant") {
        tc.lighthouse.variant = parse_variant(&v)?;
    }
    cfg.take_into("prefix_coverage", &mut tc.lighthouse.prefix_coverage)?;
    cfg.take_into("lr", &mut tc.lr)?;
    cfg.take_into("beta1", &mut tc.beta1)?;
    cfg.take_into("beta2", &mut tc.beta2)?;
    cfg.take_into("weight_decay", &mut tc.weight_decay)?;
    cfg.take_into("warmup_steps", &mut tc.warmup_steps)?;
    cfg.take_into("clip_norm", &mut tc.clip_norm)?;
    cfg.take_into("stage_1_steps", &mut tc.stage_1_steps)?;
    cfg.take_into("total_steps", &mut tc.total_steps)?;
    cfg.take_into("batch", &mut tc.batch)?;
    cfg.take_into("seed", &mut tc.seed)?;
    // Comma-separated indices of layers pinned dense even in stage 1.
    let mut dense_idx: Vec<usize> = Vec::new();
    if let Some(list) = cfg.take_list::<usize>("dense_layers")? {
        dense_idx = list;
    }
    let mut precision = Precision::F64;
    if let Some(p) = cfg.take_raw("precision") {
        precision = Precision::parse(&p)?;
    }
    let mut run_two_stage = cfg.take::<bool>("two_stage")?.unwrap_or(false);
    let mut run_baseline = cfg.take::<bool>("baseline")?.unwrap_or(false);
    let mut stem =
        cfg.take_raw("out").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("train"));
    cfg.finish()?;

    if let Some(seed) = args.seed {
        tc.seed = seed;
    }
    if let Some(p) = &args.precision {
        precision = Precision::parse(p)?;
    }
    if args.two_stage {
        run_two_stage = true;
    }
    if args.baseline {
        run_baseline = true;
    }
    if let Some(out) = &args.out {
        stem = out.clone();
    }
    if !run_two_stage && !run_baseline {
        run_two_stage = true;
    }

    tc.dense_layers = vec![false; tc.layers];
    for &i in &dense_idx {
        if i >= tc.layers {
            return Err(format!("dense_layers index {i} out of range for {} layers", tc.layers));
        }
        tc.dense_layers[i] = true;
    }
    tc.validate().map_err(|e| e.to_string())?;

    let mut outputs = Vec::new();
    if run_two_stage {
        let report = run_train(&tc, precision, false)?;
        println!("{}", report_line("two-stage", &report));
        let path = sibling(&stem, "_two_stage.csv");
        write_file(&path, &report.to_csv())?;
        outputs.push(path);
    }
    if run_baseline {
        let report = run_train(&tc, precision, true)?;
        println!("{}", report_line("baseline", &report));
        let path = sibling(&stem, "_baseline.csv");
        write_file(&path, &report.to_csv())?;
        outputs.push(path);
    }

    let mut manifest = Manifest::new("train");
    manifest.push("seed", tc.seed);
    manifest.push("precision", precision.label());
    manifest.push("two_stage", run_two_stage);
    manifest.push("baseline", run_baseline);
    manifest.push("layers", tc.layers);
    manifest.push("d_model", tc.d_model);
    manifest.push("heads", tc.heads);
    manifest.push("head_dim", tc.head_dim);
    manifest.push("ffn_dim", tc.ffn_dim);
    manifest.push("vocab", tc.vocab);
    manifest.push("alphabet", tc.alphabet);
    manifest.push("markov_order", tc.markov_order);
    manifest.push("seq_len", tc.lighthouse.seq_len);
    manifest.push("pool_factor", tc.lighthouse.pool_factor);
    manifest.push("levels", tc.lighthouse.levels);
    manifest.push("budget_k", tc.lighthouse.budget_k);
    manifest.push("chunk_size", tc.lighthouse.chunk_size);
    manifest.push("buffer_m", tc.lighthouse.buffer_m);
    manifest.push("variant", variant_label(tc.lighthouse.variant));
    manifest.push("prefix_coverage", tc.lighthouse.prefix_coverage);
    manifest.push("lr", tc.lr);
    manifest.push("beta1", tc.beta1);
    manifest.push("beta2", tc.beta2);
    manifest.push("weight_decay", tc.weight_decay);
    manifest.push("warmup_steps", tc.warmup_steps);
    manifest.push("clip_norm", tc.clip_norm);
    manifest.push("stage_1_steps", tc.stage_1_steps);
    manifest.push("total_steps", tc.total_steps);
    manifest.push("batch", tc.batch);
    let dense = tc
        .dense_layers
        .iter()
        .enumerate()
        .filter(|(_, &flag)| flag)
        .map(|(i, _)| i.to_string())
        .collect::<Vec<_>>()
        .join(",");
    manifest.push("dense_layers", dense);
    manifest.push("out", stem.display());
    let manifest_path = manifest.write(&stem, &outputs)?;

    let written = outputs
        .iter()
        .chain(std::iter::once(&manifest_path))
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ");
    println!("wrote {written}");
    Ok(true)
}

fn run_train(tc: &TrainConfig, precision: Precision, baseline: bool) -> Result<TrainReport, String> {
    match (precision, baseline) {
        (Precision::F64, false) => train_two_stage::<f64>(tc),
        (Precision::F64, true) => train_dense_baseline::<f64>(tc),
        (Precision::F32, false) => train_two_stage::<f32>(tc),
        (Precision::F32, true) => train_dense_baseline::<f32>(tc),
    }
    .map_err(|e| e.to_string())
}

fn report_line(tag: &str, report: &TrainReport) -> String {
    let mut line = format!(
        "{tag}: final loss {:.4} nats (source floor {:.4})",
        report.final_loss, report.entropy_rate
    );
    if let Some(spike) = report.spike {
        line.push_str(&format!(", switch spike {spike:+.4}"));
        match report.steps_to_recover {
            Some(steps) => line.push_str(&format!(", recovered in {steps} steps")),
            None => line.push_str(", not recovered"),
        }
    }
    line.push_str(&format!(
        ", {:.1} s wall",
        (report.stage1_wall_ms + report.stage2_wall_ms) / 1000.0
    ));
    line
}

// Path helpers shared with the manifest module are tested there; the
// argument surface itself is covered by the integration tests in `tests/`.
