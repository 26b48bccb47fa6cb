//! Command-line front end for the steering engine: single runs, scaling
//! sweeps, learning-rate calibration, ablation comparisons, and log reports.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mofsteer::config::{ConfigError, RunConfig};
use mofsteer::domain::{StageKind, WorkerClass};
use mofsteer::local::{run_local, LocalError};
use mofsteer::sim::{run_campaign, run_simulation};
use mofsteer::steering::RunStats;
use mofsteer::telemetry::audit::audit_log;
use mofsteer::telemetry::metrics::MetricsSink;
use mofsteer::telemetry::{read_jsonl, EventSink, JsonlSink, NullSink};

#[derive(Parser)]
#[command(name = "mofsteer", version, about = "Steered discovery campaigns on a desk-scale cluster model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one campaign and print its summary as JSON.
    Run(RunArgs),
    /// Run the same campaign across several cluster sizes.
    Sweep(SweepArgs),
    /// Fit the learning rate so retraining hits a target discovery fraction.
    Calibrate(CalibrateArgs),
    /// Toggle one feature on/off across shared seeds and compare the arms.
    Compare(CompareArgs),
    /// Summarize a recorded event log.
    Report(ReportArgs),
    /// Inspect or check configuration files.
    Config(ConfigArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Backend {
    Sim,
    Local,
}

#[derive(Args)]
struct CommonRunArgs {
    /// TOML config; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override: balanced partition of this many nodes.
    #[arg(long)]
    nodes: Option<u32>,
    /// Override: campaign horizon in seconds.
    #[arg(long)]
    horizon: Option<f64>,
    /// Override: master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Disable retraining (the model stays at version 1).
    #[arg(long)]
    no_retrain: bool,
    /// Enable adaptive lane reallocation.
    #[arg(long, conflicts_with = "no_realloc")]
    realloc: bool,
    /// Disable adaptive lane reallocation even if the config enables it.
    #[arg(long)]
    no_realloc: bool,
}

impl CommonRunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_path(path)
                .with_context(|| format!("loading {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(n) = self.nodes {
            cfg.partition.total_nodes = Some(n);
            cfg.partition.generator_nodes = None;
            cfg.partition.validator_nodes = None;
            cfg.partition.trainer_nodes = None;
            cfg.partition.optimizer_units = None;
        }
        if let Some(h) = self.horizon {
            cfg.horizon_s = h;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.no_retrain {
            cfg.steering.retraining_enabled = false;
        }
        if self.realloc {
            cfg.steering.reallocation.enabled = true;
        }
        if self.no_realloc {
            cfg.steering.reallocation.enabled = false;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    #[arg(long, value_enum, default_value_t = Backend::Sim)]
    backend: Backend,
    /// Write the event log here as JSONL.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Include the best frameworks found, ranked by estimated uptake.
    #[arg(long, default_value_t = 0)]
    top: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    /// Cluster sizes to run.
    #[arg(long, value_delimiter = ',', default_value = "32,64,128,256,450")]
    sizes: Vec<u32>,
    /// Measurement window start, seconds after warmup.
    #[arg(long, default_value_t = 600.0)]
    window_start: f64,
    /// Also write the table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    /// Target cumulative hit fraction among stability verdicts.
    #[arg(long, default_value_t = 0.11)]
    target: f64,
    /// Seeds averaged per evaluation.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Bisection bracket for the learning rate.
    #[arg(long, default_value_t = 1e-5)]
    lo: f64,
    #[arg(long, default_value_t = 2e-3)]
    hi: f64,
    /// Maximum bisection steps.
    #[arg(long, default_value_t = 18)]
    steps: u32,
    /// Write the base config with the fitted learning rate here as TOML.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    Retrain,
    Realloc,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    /// Feature toggled between the two arms.
    #[arg(long, value_enum, default_value_t = Ablation::Retrain)]
    ablate: Ablation,
    /// Runs per arm; arm pairs share each seed.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Throughput window start, seconds.
    #[arg(long, default_value_t = 600.0)]
    window_start: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// JSONL event log to read.
    log: PathBuf,
    /// Measurement window for utilization and throughput.
    #[arg(long, default_value_t = 600.0)]
    window_start: f64,
    #[arg(long)]
    window_end: Option<f64>,
    /// Check log invariants and list violations.
    #[arg(long)]
    audit: bool,
    /// Qualifying-verdict floor the auditor assumes for retraining.
    #[arg(long, default_value_t = 64)]
    pool_min: u64,
}

#[derive(Args)]
struct ConfigArgs {
    /// Print the default configuration as TOML.
    #[arg(long)]
    print_default: bool,
    /// Parse and validate this config, printing the resolved partition.
    #[arg(long)]
    check: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return 1;
        }
        if let Some(local) = cause.downcast_ref::<LocalError>() {
            return match local {
                LocalError::Config(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Calibrate(a) => cmd_calibrate(a),
        Cmd::Compare(a) => cmd_compare(a),
        Cmd::Report(a) => cmd_report(a),
        Cmd::Config(a) => cmd_config(a),
    }
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let cfg = args.common.load()?;
    let mut discoveries: Vec<(u64, f64, f64)> = Vec::new();

    let stats: RunStats = match (args.backend, &args.out) {
        (Backend::Sim, Some(path)) => {
            let mut sink = JsonlSink::create(path)
                .with_context(|| format!("creating {}", path.display()))?;
            let (stats, engine) = run_campaign(&cfg, &mut sink)?;
            sink.finish().context("flushing event log")?;
            discoveries = top(&engine, args.top);
            stats
        }
        (Backend::Sim, None) => {
            let (stats, engine) = run_campaign(&cfg, &mut NullSink)?;
            discoveries = top(&engine, args.top);
            stats
        }
        (Backend::Local, Some(path)) => {
            let mut sink = JsonlSink::create(path)
                .with_context(|| format!("creating {}", path.display()))?;
            let stats = run_local(&cfg, &mut sink)?;
            sink.finish().context("flushing event log")?;
            stats
        }
        (Backend::Local, None) => run_local(&cfg, &mut NullSink)?,
    };

    let mut doc = serde_json::to_value(&stats)?;
    if args.top > 0 {
        let rows: Vec<serde_json::Value> = discoveries
            .into_iter()
            .map(|(id, capacity, strain)| {
                serde_json::json!({ "framework": id, "capacity": capacity, "strain": strain })
            })
            .collect();
        doc.as_object_mut()
            .expect("stats serialize to an object")
            .insert("top_frameworks".into(), rows.into());
    }
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn top(engine: &mofsteer::steering::Engine, k: usize) -> Vec<(u64, f64, f64)> {
    engine
        .top_discoveries(k)
        .into_iter()
        .map(|(id, strain, capacity)| (id.0, capacity, strain))
        .collect()
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let base = args.common.load()?;
    let mut rows = Vec::new();
    println!(
        "{:>5} {:>10} {:>10} {:>10} {:>10} {:>6} {:>6} {:>6} {:>6} {:>6} {:>7}",
        "nodes", "gen/h", "asm/h", "val/h", "opt/h", "G", "V", "S", "T", "O", "hits"
    );
    for &n in &args.sizes {
        let mut cfg = base.clone();
        cfg.partition.total_nodes = Some(n);
        cfg.partition.generator_nodes = None;
        cfg.partition.validator_nodes = None;
        cfg.partition.trainer_nodes = None;
        cfg.partition.optimizer_units = None;
        let window = (args.window_start, cfg.horizon_s);
        let mut sink = MetricsSink::new(window);
        run_simulation(&cfg, &mut sink)?;
        let rate = |s: StageKind| sink.sustained_throughput(s).unwrap_or(0.0);
        let busy = |c: WorkerClass| sink.busy_fraction(c);
        let row = (
            n,
            rate(StageKind::GenerateLinkers),
            rate(StageKind::AssembleMofs),
            rate(StageKind::ValidateStructure),
            rate(StageKind::OptimizeCells),
            busy(WorkerClass::Generator),
            busy(WorkerClass::Validator),
            busy(WorkerClass::Scavenger),
            busy(WorkerClass::Trainer),
            busy(WorkerClass::Optimizer),
            sink.strict_hits(),
        );
        println!(
            "{:>5} {:>10.1} {:>10.1} {:>10.1} {:>10.1} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>7}",
            row.0, row.1, row.2, row.3, row.4, row.5, row.6, row.7, row.8, row.9, row.10
        );
        rows.push(row);
    }
    if let Some(path) = &args.out {
        let mut csv = String::from(
            "nodes,generate_hr,assemble_hr,validate_hr,optimize_hr,busy_g,busy_v,busy_s,busy_t,busy_o,strict_hits\n",
        );
        for r in &rows {
            csv.push_str(&format!(
                "{},{:.3},{:.3},{:.3},{:.3},{:.4},{:.4},{:.4},{:.4},{:.4},{}\n",
                r.0, r.1, r.2, r.3, r.4, r.5, r.6, r.7, r.8, r.9, r.10
            ));
        }
        fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn strict_fraction_for(cfg: &RunConfig, alpha: f64, seeds: u64) -> Result<f64> {
    let mut total_hits = 0u64;
    let mut total_evals = 0u64;
    for i in 0..seeds {
        let mut run = cfg.clone();
        run.quality.learning_rate = alpha;
        run.seed = cfg.seed.wrapping_add(i);
        let stats = run_simulation(&run, &mut NullSink)?;
        total_hits += stats.strict_hits;
        total_evals += stats.stability_evaluated;
    }
    if total_evals == 0 {
        bail!("no stability verdicts produced; horizon too short for calibration");
    }
    Ok(total_hits as f64 / total_evals as f64)
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let mut cfg = args.common.load()?;
    if args.common.nodes.is_none() && cfg.partition.total_nodes.is_none() {
        cfg.partition.total_nodes = Some(32);
    }
    if args.common.horizon.is_none() {
        cfg.horizon_s = 5400.0;
    }
    cfg.steering.retraining_enabled = true;

    let (mut lo, mut hi) = (args.lo, args.hi);
    if !(lo > 0.0 && hi > lo) {
        bail!("need 0 < lo < hi");
    }
    let f_lo = strict_fraction_for(&cfg, lo, args.seeds)?;
    let f_hi = strict_fraction_for(&cfg, hi, args.seeds)?;
    eprintln!("bracket: f({lo:.2e}) = {f_lo:.4}, f({hi:.2e}) = {f_hi:.4}");
    if f_lo > args.target || f_hi < args.target {
        println!(
            "{}",
            serde_json::json!({
                "bracketed": false, "lo": lo, "hi": hi,
                "fraction_lo": f_lo, "fraction_hi": f_hi, "target": args.target,
            })
        );
        return Ok(());
    }

    let mut alpha = 0.5 * (lo + hi);
    let mut fraction = 0.0;
    for step in 0..args.steps {
        alpha = 0.5 * (lo + hi);
        fraction = strict_fraction_for(&cfg, alpha, args.seeds)?;
        eprintln!("step {step}: alpha {alpha:.6e} -> fraction {fraction:.4}");
        if (fraction - args.target).abs() < 5e-4 {
            break;
        }
        if fraction < args.target {
            lo = alpha;
        } else {
            hi = alpha;
        }
    }
    let mut doc = serde_json::json!({
        "bracketed": true,
        "alpha": alpha,
        "fraction": fraction,
        "target": args.target,
        "seeds": args.seeds,
    });
    if let Some(path) = &args.out {
        let mut fitted = args.common.load()?;
        fitted.quality.learning_rate = alpha;
        fs::write(path, fitted.to_toml_string())
            .with_context(|| format!("writing {}", path.display()))?;
        doc.as_object_mut()
            .expect("json object")
            .insert("written".into(), path.display().to_string().into());
    }
    println!("{doc}");
    Ok(())
}

struct ArmTotals {
    completions: Vec<u64>,
    curve: Vec<u64>,
    hits: u64,
    evaluated: u64,
}

fn run_arm(cfg: &RunConfig, seeds: u64, window_start: f64, checkpoints: &[f64]) -> Result<ArmTotals> {
    let mut totals = ArmTotals {
        completions: vec![0; StageKind::ALL.len()],
        curve: vec![0; checkpoints.len()],
        hits: 0,
        evaluated: 0,
    };
    for i in 0..seeds {
        let mut run = cfg.clone();
        run.seed = cfg.seed.wrapping_add(i);
        let mut sink = MetricsSink::new((window_start, cfg.horizon_s));
        run_simulation(&run, &mut sink)?;
        for (k, stage) in StageKind::ALL.iter().enumerate() {
            totals.completions[k] += sink.completions(*stage);
        }
        for (k, t) in checkpoints.iter().enumerate() {
            totals.curve[k] += sink.strict_hits_in((0.0, *t));
        }
        totals.hits += sink.strict_hits_in((0.0, cfg.horizon_s));
        totals.evaluated += sink.stability_evaluated();
    }
    Ok(totals)
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let base = args.common.load()?;
    let (label, mut on, mut off) = match args.ablate {
        Ablation::Retrain => ("retraining", base.clone(), base.clone()),
        Ablation::Realloc => ("reallocation", base.clone(), base.clone()),
    };
    match args.ablate {
        Ablation::Retrain => {
            on.steering.retraining_enabled = true;
            off.steering.retraining_enabled = false;
        }
        Ablation::Realloc => {
            on.steering.reallocation.enabled = true;
            off.steering.reallocation.enabled = false;
        }
    }

    let checkpoints: Vec<f64> = (1..=4).map(|i| base.horizon_s * i as f64 / 4.0).collect();
    let arm_on = run_arm(&on, args.seeds, args.window_start, &checkpoints)?;
    let arm_off = run_arm(&off, args.seeds, args.window_start, &checkpoints)?;

    println!("ablation: {label}   seeds per arm: {} (shared)", args.seeds);
    println!("\nconfirmed discoveries by checkpoint (summed over seeds)");
    println!("{:>10} {:>8} {:>8}", "t (s)", "on", "off");
    for (k, t) in checkpoints.iter().enumerate() {
        println!("{:>10.0} {:>8} {:>8}", t, arm_on.curve[k], arm_off.curve[k]);
    }

    let span_h = (base.horizon_s - args.window_start).max(1.0) / 3600.0;
    println!("\nthroughput per run (completions/hour in the window)");
    println!("{:>20} {:>10} {:>10}", "stage", "on", "off");
    for (k, stage) in StageKind::ALL.iter().enumerate() {
        let per_hour = |c: u64| c as f64 / args.seeds as f64 / span_h;
        if arm_on.completions[k] == 0 && arm_off.completions[k] == 0 {
            continue;
        }
        println!(
            "{:>20} {:>10.1} {:>10.1}",
            stage,
            per_hour(arm_on.completions[k]),
            per_hour(arm_off.completions[k])
        );
    }

    println!(
        "\nfinal hits: on {} of {} verdicts, off {} of {}",
        arm_on.hits, arm_on.evaluated, arm_off.hits, arm_off.evaluated
    );
    if arm_off.hits > 0 {
        println!("hit ratio on/off: {:.2}", arm_on.hits as f64 / arm_off.hits as f64);
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let events = read_jsonl(&args.log)
        .with_context(|| format!("reading {}", args.log.display()))?;
    if events.is_empty() {
        bail!("log is empty");
    }
    let end = args
        .window_end
        .unwrap_or_else(|| events.last().map_or(0.0, |e| e.time));
    let window = (args.window_start, end);
    let mut sink = MetricsSink::new(window);
    for e in &events {
        sink.record(e);
    }

    println!("events: {}   span: {:.1}s   window: [{:.0}, {:.0}]s", events.len(), events.last().unwrap().time, window.0, window.1);
    println!("\nutilization (busy fraction of offered slot-seconds)");
    for class in WorkerClass::ALL {
        println!("  {:>10}: {:.4}", class.name(), sink.busy_fraction(class));
    }
    println!("\nthroughput (completions per hour, least-squares over window)");
    for stage in StageKind::ALL {
        match sink.sustained_throughput(stage) {
            Ok(rate) => println!("  {:>20}: {:>10.1}  (total {})", stage, rate, sink.completions(stage)),
            Err(_) => println!("  {:>20}: {:>10}  (total {})", stage, "-", sink.completions(stage)),
        }
    }
    println!("\nhandoff latency (seconds)");
    for (kind, s) in sink.handoff_latencies() {
        println!(
            "  {:>18?}: mean {:>9.4}  p25 {:>9.4}  p50 {:>9.4}  p75 {:>9.4}  n={}",
            kind, s.mean, s.p25, s.p50, s.p75, s.count
        );
    }
    if let Some(f) = sink.strict_fraction() {
        println!(
            "\nconfirmed hits: {} of {} stability verdicts ({:.4})",
            sink.strict_hits(),
            sink.stability_evaluated(),
            f
        );
    }
    if args.audit {
        let report = audit_log(&events, args.pool_min);
        println!("\naudit: {} events checked, {} violations", report.events_checked, report.violations.len());
        for v in report.violations.iter().take(20) {
            println!("  {v}");
        }
        if !report.is_clean() {
            bail!("log violates {} invariants", report.violations.len());
        }
    }
    Ok(())
}

fn cmd_config(args: ConfigArgs) -> Result<()> {
    if args.print_default {
        print!("{}", RunConfig::default().to_toml_string());
        return Ok(());
    }
    if let Some(path) = &args.check {
        let cfg = RunConfig::from_path(path)
            .with_context(|| format!("loading {}", path.display()))?;
        let partition = cfg.validate()?;
        println!(
            "ok: {} nodes ({} generator, {} validator, {} trainer, {} optimizer units), horizon {:.0}s, seed {}",
            partition.total_nodes(),
            partition.generator_nodes,
            partition.validator_nodes,
            partition.trainer_nodes,
            partition.optimizer_units,
            cfg.horizon_s,
            cfg.seed
        );
        return Ok(());
    }
    bail!("nothing to do: pass --print-default or --check <path>");
}
