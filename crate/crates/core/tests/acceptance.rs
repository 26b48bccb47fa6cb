//! Full-system acceptance checks: weak scaling, saturation, handoff
//! latencies, the retraining lift, scheduling invariants, strain scoring,
//! determinism, live-backend agreement, and funnel survival rates.
//!
//! Each check prints one `PASS:`/`FAIL:` line (visible with `--nocapture`)
//! before asserting, so a full run reads as a checklist. The expensive
//! cluster runs are shared between checks through lazily built caches.

use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{Matrix3, Rotation3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mofsteer::config::RunConfig;
use mofsteer::domain::{StageKind, WorkerClass, TRAINING_STRAIN_THRESHOLD};
use mofsteer::llst;
use mofsteer::local::run_local;
use mofsteer::quality::QualityModel;
use mofsteer::sim::run_simulation;
use mofsteer::stages::StageProfile;
use mofsteer::telemetry::audit::audit_log;
use mofsteer::telemetry::metrics::{HandoffKind, MetricsSink};
use mofsteer::telemetry::{EventKind, JsonlSink, LogEvent, NullSink, VecSink};

const SWEEP_SIZES: [u32; 5] = [32, 64, 128, 256, 450];

fn sized_config(nodes: u32) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.partition.total_nodes = Some(nodes);
    cfg
}

fn conclude(label: &str, summary: String, fails: Vec<String>) {
    if fails.is_empty() {
        println!("PASS: {label} {summary}");
    } else {
        println!("FAIL: {label} {summary} [{}]", fails.join("; "));
    }
    assert!(fails.is_empty(), "{label}: {}", fails.join("; "));
}

// --- shared cluster runs ---------------------------------------------------

struct ScaleRun {
    nodes: u32,
    sink: MetricsSink,
}

struct Sweep {
    runs: Vec<ScaleRun>,
    build_secs: f64,
}

/// One two-hour campaign per cluster size, measured past the warmup.
fn scale_sweep() -> &'static Sweep {
    static SWEEP: OnceLock<Sweep> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let start = Instant::now();
        let runs = SWEEP_SIZES
            .iter()
            .map(|&nodes| {
                let mut cfg = sized_config(nodes);
                cfg.horizon_s = 7200.0;
                cfg.seed = 4242;
                let mut sink = MetricsSink::new((600.0, cfg.horizon_s));
                run_simulation(&cfg, &mut sink).expect("scale sweep run");
                ScaleRun { nodes, sink }
            })
            .collect();
        Sweep {
            runs,
            build_secs: start.elapsed().as_secs_f64(),
        }
    })
}

struct Arm {
    hits: u64,
    evals: u64,
}

struct LearningRuns {
    on32: Arm,
    off32: Arm,
    on64: Arm,
    off64: Arm,
}

const LEARNING_SEEDS: u64 = 5;
const LEARNING_HORIZON: f64 = 5400.0;

fn learning_arm(nodes: u32, retrain: bool) -> Arm {
    let mut hits = 0;
    let mut evals = 0;
    for i in 0..LEARNING_SEEDS {
        let mut cfg = sized_config(nodes);
        cfg.horizon_s = LEARNING_HORIZON;
        cfg.seed = 100 + i;
        cfg.steering.retraining_enabled = retrain;
        let stats = run_simulation(&cfg, &mut NullSink).expect("learning arm");
        hits += stats.strict_hits;
        evals += stats.stability_evaluated;
    }
    Arm { hits, evals }
}

/// Retraining on/off at 32 and 64 nodes over 90 minutes, five shared seeds.
fn learning_runs() -> &'static LearningRuns {
    static RUNS: OnceLock<LearningRuns> = OnceLock::new();
    RUNS.get_or_init(|| LearningRuns {
        on32: learning_arm(32, true),
        off32: learning_arm(32, false),
        on64: learning_arm(64, true),
        off64: learning_arm(64, false),
    })
}

// --- criteria ----------------------------------------------------------------

#[test]
fn c01_stage_throughput_scales_linearly_with_cluster_size() {
    let sweep = scale_sweep();
    let rate =
        |run: &ScaleRun, stage: StageKind| run.sink.sustained_throughput(stage).unwrap_or(0.0);

    let mut series: Vec<(&str, Vec<f64>)> = vec![
        ("generate", Vec::new()),
        ("assemble", Vec::new()),
        ("validate", Vec::new()),
        ("optimize+estimate", Vec::new()),
    ];
    for run in &sweep.runs {
        series[0].1.push(rate(run, StageKind::GenerateLinkers));
        series[1].1.push(rate(run, StageKind::AssembleMofs));
        series[2].1.push(rate(run, StageKind::ValidateStructure));
        series[3]
            .1
            .push(rate(run, StageKind::OptimizeCells) + rate(run, StageKind::EstimateAdsorption));
    }

    let mut fails = Vec::new();
    let mut worst = 0.0_f64;
    for (name, rates) in &series {
        let base = rates[0];
        if !(base > 0.0) {
            fails.push(format!("{name}: no throughput at {} nodes", SWEEP_SIZES[0]));
            continue;
        }
        for (i, &r) in rates.iter().enumerate().skip(1) {
            let expect = base * sweep.runs[i].nodes as f64 / sweep.runs[0].nodes as f64;
            let dev = (r - expect) / expect;
            if dev.abs() > worst.abs() {
                worst = dev;
            }
            if dev.abs() > 0.15 {
                fails.push(format!(
                    "{name} at {} nodes: {:.1}/h vs {:.1}/h extrapolated ({:+.1}%)",
                    sweep.runs[i].nodes,
                    r,
                    expect,
                    dev * 100.0
                ));
            }
        }
    }
    if sweep.build_secs >= 120.0 {
        fails.push(format!("sweep took {:.0}s, budget is 120s", sweep.build_secs));
    }
    conclude(
        "C1",
        format!(
            "throughput at 64..450 nodes within 15% of linear scaling from 32 \
             (worst {:+.1}%, sweep {:.0}s)",
            worst * 100.0,
            sweep.build_secs
        ),
        fails,
    );
}

#[test]
fn c02_every_worker_class_saturates_at_full_scale() {
    let mut cfg = sized_config(450);
    cfg.seed = 7;
    let mut sink = MetricsSink::new((600.0, cfg.horizon_s));
    run_simulation(&cfg, &mut sink).expect("450-node run");

    let mut fails = Vec::new();
    let mut min_busy = f64::INFINITY;
    let mut min_class = "";
    for class in WorkerClass::ALL {
        let busy = sink.busy_fraction(class);
        if busy < min_busy {
            min_busy = busy;
            min_class = class.name();
        }
        if busy <= 0.99 {
            fails.push(format!("{} busy {:.4} <= 0.99", class.name(), busy));
        }
    }
    conclude(
        "C2",
        format!(
            "all five worker classes busy > 0.99 at 450 nodes over the default hour \
             (min {min_busy:.4}, {min_class})"
        ),
        fails,
    );
}

#[test]
fn c03_handoff_latencies_stay_bounded_across_scales() {
    let sweep = scale_sweep();
    let mut fails = Vec::new();

    let mut proc_means = Vec::new();
    for run in &sweep.runs {
        match run.sink.latency_summary(HandoffKind::ProcessedLinkers) {
            Some(s) => {
                if !(5.0..=60.0).contains(&s.mean) {
                    fails.push(format!(
                        "processing latency {:.2}s at {} nodes outside [5, 60]",
                        s.mean, run.nodes
                    ));
                }
                proc_means.push(s.mean);
            }
            None => fails.push(format!("{} nodes: no processed-batch handoffs", run.nodes)),
        }
    }
    let (proc_lo, proc_hi) = proc_means
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &m| (lo.min(m), hi.max(m)));
    if proc_hi > proc_lo * 1.20 {
        fails.push(format!(
            "processing latency varies {:.1}% across scales (limit 20%)",
            (proc_hi / proc_lo - 1.0) * 100.0
        ));
    }

    let mut adoption = Vec::new();
    for run in &sweep.runs {
        match run.sink.latency_summary(HandoffKind::ModelAdoption) {
            Some(s) => adoption.push((run.nodes, s.mean)),
            None => fails.push(format!("{} nodes: no model adoptions", run.nodes)),
        }
    }
    for pair in adoption.windows(2) {
        if pair[1].1 > pair[0].1 + 1e-9 {
            fails.push(format!(
                "adoption latency rose {:.3}s -> {:.3}s from {} to {} nodes",
                pair[0].1, pair[1].1, pair[0].0, pair[1].0
            ));
        }
    }

    let mut chain_worst = 0.0_f64;
    for run in &sweep.runs {
        match run.sink.latency_summary(HandoffKind::AdsorptionChain) {
            Some(s) => {
                chain_worst = chain_worst.max(s.mean).max(s.p75);
                if s.mean > 2.0 || s.p75 > 2.0 {
                    fails.push(format!(
                        "uptake chain gap mean {:.3}s / p75 {:.3}s at {} nodes exceeds 2s",
                        s.mean, s.p75, run.nodes
                    ));
                }
            }
            None => fails.push(format!("{} nodes: no chained uptake starts", run.nodes)),
        }
    }

    let adopt_ends = (
        adoption.first().map_or(0.0, |p| p.1),
        adoption.last().map_or(0.0, |p| p.1),
    );
    conclude(
        "C3",
        format!(
            "processing latency {proc_lo:.2}..{proc_hi:.2}s, adoption latency \
             {:.3}s -> {:.3}s non-increasing, chained uptake gap <= {chain_worst:.3}s",
            adopt_ends.0, adopt_ends.1
        ),
        fails,
    );
}

#[test]
fn c04_retraining_multiplies_confirmed_discoveries() {
    let runs = learning_runs();
    let frac = |arm: &Arm| arm.hits as f64 / arm.evals.max(1) as f64;
    let f_on = frac(&runs.on32);
    let f_off = frac(&runs.off32);
    let ratio32 = runs.on32.hits as f64 / runs.off32.hits.max(1) as f64;
    let ratio64 = runs.on64.hits as f64 / runs.off64.hits.max(1) as f64;

    let mut fails = Vec::new();
    if !(0.105..=0.115).contains(&f_on) {
        fails.push(format!("32-node steered hit fraction {f_on:.4} outside 0.110 +/- 0.005"));
    }
    if !(0.045..=0.055).contains(&f_off) {
        fails.push(format!("32-node baseline hit fraction {f_off:.4} outside 0.050 +/- 0.005"));
    }
    if !(2.0..=2.7).contains(&ratio32) {
        fails.push(format!("32-node on/off hit ratio {ratio32:.2} outside [2.0, 2.7]"));
    }
    if !(1.4..=1.9).contains(&ratio64) {
        fails.push(format!("64-node on/off hit ratio {ratio64:.2} outside [1.4, 1.9]"));
    }
    conclude(
        "C4",
        format!(
            "over {LEARNING_SEEDS} seeds at 90 min: hit fraction {f_off:.3} -> {f_on:.3} \
             with retraining, count ratio {ratio32:.2}x at 32 nodes, {ratio64:.2}x at 64"
        ),
        fails,
    );
}

#[test]
fn c05_full_scale_beats_small_scale_per_node() {
    let runs = learning_runs();
    const SEEDS_450: u64 = 3;
    let mut hits450 = 0;
    for i in 0..SEEDS_450 {
        let mut cfg = sized_config(450);
        cfg.horizon_s = LEARNING_HORIZON;
        cfg.seed = 300 + i;
        let stats = run_simulation(&cfg, &mut NullSink).expect("450-node arm");
        hits450 += stats.strict_hits;
    }
    let hours = LEARNING_HORIZON / 3600.0;
    let per32 = runs.on32.hits as f64 / (LEARNING_SEEDS as f64 * 32.0 * hours);
    let per450 = hits450 as f64 / (SEEDS_450 as f64 * 450.0 * hours);
    let ratio = per450 / per32;

    let mut fails = Vec::new();
    if !(ratio >= 1.3) {
        fails.push(format!(
            "450-node rate {per450:.3} hits/node-hour vs {per32:.3} at 32 nodes: \
             {ratio:.2}x < 1.3x"
        ));
    }
    conclude(
        "C5",
        format!(
            "confirmed discoveries per node-hour: {per32:.3} at 32 nodes, \
             {per450:.3} at 450 ({ratio:.2}x, need >= 1.3x)"
        ),
        fails,
    );
}

#[test]
fn c06_scheduling_invariants_hold_across_randomized_scenarios() {
    const SCENARIOS: u64 = 1000;
    let jitters = [0.0, 0.05, 0.1, 0.2];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut events_checked = 0usize;
    let mut fails = Vec::new();

    for i in 0..SCENARIOS {
        let mut cfg = RunConfig::default();
        cfg.seed = 10_000 + i;
        cfg.horizon_s = rng.gen_range(360.0..840.0);
        cfg.partition.total_nodes = None;
        cfg.partition.generator_nodes = Some(rng.gen_range(1..=2));
        cfg.partition.validator_nodes = Some(rng.gen_range(1..=3));
        cfg.partition.trainer_nodes = Some(1);
        cfg.partition.optimizer_units = Some(rng.gen_range(0..=1));
        cfg.partition.scavengers_per_validator_node = rng.gen_range(1..=3);
        cfg.stages.duration_jitter = jitters[rng.gen_range(0..jitters.len())];
        cfg.steering.reallocation.enabled = rng.gen_bool(0.3);
        if cfg.steering.reallocation.enabled {
            // leave room for a drain and make the trigger reachable quickly
            cfg.partition.generator_nodes = Some(2);
            cfg.steering.reallocation.sustain_s = 60.0;
        }

        let mut sink = VecSink::default();
        run_simulation(&cfg, &mut sink).expect("scenario run");
        let report = audit_log(&sink.events, cfg.steering.retrain_pool_min);
        events_checked += report.events_checked;
        if !report.is_clean() {
            fails.push(format!(
                "scenario {i} (seed {}): {} violations, first: {}",
                cfg.seed,
                report.violations.len(),
                report.violations[0]
            ));
            if fails.len() >= 5 {
                break;
            }
        }
    }
    conclude(
        "C6",
        format!("{SCENARIOS} randomized scenarios, {events_checked} events audited, zero violations"),
        fails,
    );
}

/// Closed-form eigenvalues of a symmetric 3x3 matrix via the trigonometric
/// solution of its characteristic cubic; independent of the linear-algebra
/// crate's iterative solver.
fn trig_sym_eigenvalues(m: &Matrix3<f64>) -> [f64; 3] {
    let p1 = m[(0, 1)].powi(2) + m[(0, 2)].powi(2) + m[(1, 2)].powi(2);
    let q = (m[(0, 0)] + m[(1, 1)] + m[(2, 2)]) / 3.0;
    if p1 == 0.0 {
        return [m[(0, 0)], m[(1, 1)], m[(2, 2)]];
    }
    let p2 = (m[(0, 0)] - q).powi(2)
        + (m[(1, 1)] - q).powi(2)
        + (m[(2, 2)] - q).powi(2)
        + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let b = (*m - Matrix3::identity() * q) / p;
    let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    *Rotation3::from_euler_angles(
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
    )
    .matrix()
}

#[test]
fn c07_strain_score_is_exact_invariant_and_matches_an_independent_eigensolver() {
    let mut fails = Vec::new();

    let cell = Matrix3::new(9.0, 0.0, 0.3, 0.0, 12.5, 0.0, 0.1, 0.0, 15.0);
    let s0 = llst::strain(&cell, &cell).unwrap();
    if s0 != 0.0 {
        fails.push(format!("identity pair scored {s0:e}, expected exactly 0"));
    }

    for eps in [0.25, 0.0625, 0.007, 0.31] {
        let r1 = Matrix3::identity() * 8.0;
        let r2 = r1 * (1.0 + eps);
        let got = llst::strain(&r1, &r2).unwrap();
        if (got - eps).abs() > 1e-15 {
            fails.push(format!(
                "isotropic stretch {eps}: scored {got:.17}, off by {:e}",
                (got - eps).abs()
            ));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (r1, r2) = llst::synthesize_cells(0.18, &mut rng);
    let base = llst::strain(&r1, &r2).unwrap();
    let mut rot_worst = 0.0_f64;
    for _ in 0..100 {
        let q = random_rotation(&mut rng);
        let got = llst::strain(&(q * r1), &(q * r2)).unwrap();
        rot_worst = rot_worst.max((got - base).abs());
    }
    if rot_worst > 1e-9 {
        fails.push(format!("rotated frame shifted the score by {rot_worst:e} (limit 1e-9)"));
    }

    let mut oracle_worst = 0.0_f64;
    let mut checked = 0;
    while checked < 1000 {
        let reference = Matrix3::<f64>::from_fn(|_, _| rng.gen_range(-2.0..2.0));
        if reference.determinant().abs() < 0.5 {
            continue;
        }
        let relaxed = Matrix3::<f64>::from_fn(|_, _| rng.gen_range(-2.0..2.0));
        let sym = llst::deformation(&reference, &relaxed).unwrap();
        let ours = llst::max_abs_eigenvalue(&sym);
        let oracle = trig_sym_eigenvalues(&sym)
            .iter()
            .fold(0.0_f64, |acc, v| acc.max(v.abs()));
        oracle_worst = oracle_worst.max((ours - oracle).abs());
        checked += 1;
    }
    if oracle_worst > 1e-9 {
        fails.push(format!(
            "iterative and closed-form eigensolvers disagree by {oracle_worst:e} (limit 1e-9)"
        ));
    }

    conclude(
        "C7",
        format!(
            "strain scoring: zero at identity, isotropic amplitude exact to 1e-15, \
             rotation shift <= {rot_worst:.1e} over 100 frames, closed-form eigensolver \
             agreement <= {oracle_worst:.1e} over 1000 pairs"
        ),
        fails,
    );
}

#[test]
fn c08_equal_config_and_seed_reproduce_the_log_byte_for_byte() {
    let mut cfg = sized_config(32);
    cfg.horizon_s = 900.0;
    cfg.seed = 31;

    let run = |cfg: &RunConfig| {
        let mut sink = JsonlSink::new(Vec::new());
        run_simulation(cfg, &mut sink).expect("deterministic run");
        sink.finish().expect("flush log")
    };
    let first = run(&cfg);
    let second = run(&cfg);

    let mut fails = Vec::new();
    if first.is_empty() {
        fails.push("run produced an empty log".into());
    }
    if first != second {
        let at = first
            .iter()
            .zip(&second)
            .position(|(a, b)| a != b)
            .unwrap_or(first.len().min(second.len()));
        fails.push(format!(
            "logs differ (lengths {} vs {}, first divergence at byte {at})",
            first.len(),
            second.len()
        ));
    }
    let lines = first.iter().filter(|&&b| b == b'\n').count();
    conclude(
        "C8",
        format!("repeated run reproduced the log byte for byte ({} bytes, {lines} events)", first.len()),
        fails,
    );
}

fn stage_counts_at(events: &[LogEvent], t: f64) -> Vec<u64> {
    let mut counts = vec![0u64; StageKind::ALL.len()];
    for e in events {
        if e.kind == EventKind::TaskCompleted && e.time <= t {
            if let Some(stage) = e.stage {
                counts[stage.order() as usize - 1] += 1;
            }
        }
    }
    counts
}

#[test]
fn c09_thread_pool_backend_tracks_the_simulator() {
    let mut cfg = RunConfig::default();
    cfg.partition.total_nodes = None;
    cfg.partition.generator_nodes = Some(1);
    cfg.partition.validator_nodes = Some(2);
    cfg.partition.trainer_nodes = Some(1);
    cfg.partition.optimizer_units = Some(0);
    cfg.partition.scavengers_per_validator_node = 1;
    cfg.horizon_s = 60_000.0;
    cfg.seed = 5150;
    // default time scale 1e-3: the live run spends about a minute of wall
    // clock sleeping through 60000 virtual seconds

    let mut sim = VecSink::default();
    run_simulation(&cfg, &mut sim).expect("simulated arm");
    let mut live = VecSink::default();
    run_local(&cfg, &mut live).expect("live arm");

    let mut fails = Vec::new();
    let mut worst = 0.0_f64;
    let mut worst_at = String::from("-");
    for t in [20_000.0, 40_000.0, 60_000.0] {
        let a = stage_counts_at(&sim.events, t);
        let b = stage_counts_at(&live.events, t);
        for (k, stage) in StageKind::ALL.iter().enumerate() {
            if a[k] < 20 && b[k] < 20 {
                continue;
            }
            let dev = (a[k] as f64 - b[k] as f64).abs() / a[k].max(1) as f64;
            if dev > worst {
                worst = dev;
                worst_at = format!("{stage} at t={t:.0}: {} vs {}", a[k], b[k]);
            }
            if dev > 0.10 {
                fails.push(format!(
                    "{stage} at t={t:.0}: simulated {} vs live {} ({:+.1}%)",
                    a[k],
                    b[k],
                    (b[k] as f64 / a[k].max(1) as f64 - 1.0) * 100.0
                ));
            }
        }
    }
    conclude(
        "C9",
        format!(
            "live thread-pool run matched per-stage counts within 10% at three \
             checkpoints (worst {:.1}%: {worst_at})",
            worst * 100.0
        ),
        fails,
    );
}

#[test]
fn c10_funnel_survival_matches_the_calibrated_rates() {
    let profile = StageProfile::default();
    let model = QualityModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2026);

    const N_LINKERS: usize = 400_000;
    let mut survivors = Vec::new();
    for _ in 0..N_LINKERS {
        let fitness = model.sample_fitness(0.5, &mut rng);
        if rng.gen_bool(profile.process_pass) {
            survivors.push(fitness);
        }
    }
    let process_rate = survivors.len() as f64 / N_LINKERS as f64;

    let mut assembled = 0u64;
    let mut stable = 0u64;
    for mof in survivors.chunks_exact(8) {
        if !rng.gen_bool(profile.assembly_pass) {
            continue;
        }
        assembled += 1;
        if !rng.gen_bool(profile.presim_pass) {
            continue;
        }
        let fitness = mof.iter().sum::<f64>() / 8.0;
        if model.sample_strain(fitness, &mut rng) < TRAINING_STRAIN_THRESHOLD {
            stable += 1;
        }
    }
    let stable_rate = stable as f64 / assembled.max(1) as f64;

    let mut fails = Vec::new();
    if !(0.218..=0.238).contains(&process_rate) {
        fails.push(format!(
            "post-processing survival {:.2}% outside 22.8% +/- 1pt",
            process_rate * 100.0
        ));
    }
    if !(0.076..=0.096).contains(&stable_rate) {
        fails.push(format!(
            "stability pass {:.2}% of assembled outside 8.6% +/- 1pt",
            stable_rate * 100.0
        ));
    }
    conclude(
        "C10",
        format!(
            "{N_LINKERS} linkers at mid-range generator quality: {:.2}% survive \
             processing, {:.2}% of {assembled} assembled frameworks pass stability",
            process_rate * 100.0,
            stable_rate * 100.0
        ),
        fails,
    );
}
