//! The steering engine: every scheduling decision a campaign makes.
//!
//! The engine is backend-agnostic. A backend reports three moments of a
//! task's life (completion, the control echo shortly after it, and the
//! moment its output payload is usable downstream) and dispatches whatever
//! new work the engine hands back. Every stochastic choice (duration,
//! outcome, payload size, measured property) is pre-drawn at submit time
//! from a persistent per-slot stream, so the simulated and the locally
//! executed campaign realize statistically identical workloads.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};

use nalgebra::Matrix3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cluster::Partition;
use crate::config::{AssemblyDiscipline, ConfigError, RunConfig, SteeringConfig};
use crate::domain::{
    AnchorKind, LinkerId, MofId, MofRecord, MofStage, SimTime, SlotId, StageKind, TaskId,
    TaskOutcome, WorkerClass, LINKERS_PER_ANCHOR, STRICT_STRAIN_THRESHOLD,
    TRAINING_STRAIN_THRESHOLD,
};
use crate::llst;
use crate::quality::QualityModel;
use crate::rng::{RngBank, StreamUse};
use crate::stages::{self, StageProfile, CONTROL_LATENCY_S, PAYLOAD_LATENCY_S};
use crate::telemetry::{EventKind, EventSink, LogEvent};

/// Scavengers allowed to assemble under the budgeted discipline: one per
/// 256 validator slots, rounded up.
pub fn assembly_budget(validator_slots: u32) -> u32 {
    validator_slots.div_ceil(256)
}

/// What a backend needs to physically run one submitted task.
#[derive(Debug, Clone, Copy)]
pub struct PreparedTask {
    pub task_id: TaskId,
    pub slot: SlotId,
    pub stage: StageKind,
    pub duration: SimTime,
}

/// When the engine wants to hear back about a completed task.
#[derive(Debug, Clone, Copy)]
pub struct CompletionTiming {
    /// Completion echo on the control plane.
    pub decision_at: SimTime,
    /// Output payload transferred and parsed.
    pub payload_at: SimTime,
}

/// Counters accumulated over a run.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunStats {
    pub completed: BTreeMap<StageKind, u64>,
    pub succeeded: BTreeMap<StageKind, u64>,
    /// Validation tasks that reached the expensive stability phase.
    pub stability_evaluated: u64,
    pub strict_hits: u64,
    pub training_hits: u64,
    pub capacity_estimates: u64,
    pub retrains: u64,
    pub final_version: u32,
    pub final_quality: f64,
    pub assembled_backlog: usize,
    pub pending_jobs: usize,
}

#[derive(Debug, Clone, Copy)]
struct PoolLinker {
    id: LinkerId,
    fitness: f64,
}

#[derive(Debug, Clone, Copy)]
struct MofMeta {
    linkers: [LinkerId; 8],
    fitness: f64,
    assembled_at: SimTime,
}

#[derive(Debug)]
struct StableMof {
    record: MofRecord,
    fitness: f64,
}

/// Ordered so that a max-heap pops the lowest strain, breaking ties toward
/// the most recently queued entry.
#[derive(Debug, Clone, Copy)]
struct StableEntry {
    strain: f64,
    seq: u64,
    mof: MofId,
}

impl PartialEq for StableEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}
impl Eq for StableEntry {}
impl PartialOrd for StableEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for StableEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .strain
            .total_cmp(&self.strain)
            .then(self.seq.cmp(&other.seq))
    }
}

#[derive(Debug)]
enum OddJob {
    Process {
        source: TaskId,
        linkers: Vec<(LinkerId, AnchorKind)>,
        batch_quality: f64,
    },
    Charges {
        mof: MofId,
    },
}

#[derive(Debug)]
enum Plan {
    Generate {
        linkers: Vec<(LinkerId, AnchorKind)>,
        quality: f64,
    },
    Process {
        survivors: Vec<(AnchorKind, PoolLinker)>,
    },
    Assemble {
        mof: MofId,
    },
    Validate {
        mof: MofId,
        cells: Option<(Matrix3<f64>, Matrix3<f64>)>,
    },
    Optimize {
        mof: MofId,
    },
    Charges {
        mof: MofId,
    },
    Adsorption {
        mof: MofId,
    },
    Retrain {
        examples: u64,
        new_version: u32,
        new_quality: f64,
    },
}

#[derive(Debug)]
struct Prepared {
    stage: StageKind,
    slot: SlotId,
    entity_ids: Vec<u64>,
    output_bytes: u64,
    duration: SimTime,
    outcome: TaskOutcome,
    value: Option<f64>,
    plan: Plan,
}

#[derive(Debug, Clone, Copy)]
struct ModelVersion {
    version: u32,
    quality: f64,
    usable_at: SimTime,
}

#[derive(Debug, Default)]
struct ReallocState {
    over_since: Option<SimTime>,
    empty_since: Option<SimTime>,
    /// Node being emptied -> (target class, lanes still running). Ordered
    /// so that simultaneous finalizations resolve identically across runs.
    draining: BTreeMap<u32, (WorkerClass, u32)>,
    /// Generator nodes currently serving as validator nodes.
    donated: Vec<u32>,
}

type StreamKey = (u8, SlotId, StreamUse);

fn anchor_index(anchor: AnchorKind) -> usize {
    match anchor {
        AnchorKind::Bca => 0,
        AnchorKind::Bzn => 1,
    }
}

/// Picks the linker ids behind the lowest-strain half (rounded up) of the
/// qualifying frameworks.
pub fn lowest_strain_linkers(qualifiers: &[(f64, MofId, [LinkerId; 8])]) -> BTreeSet<LinkerId> {
    let mut sorted: Vec<&(f64, MofId, [LinkerId; 8])> = qualifiers.iter().collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let keep = sorted.len().div_ceil(2);
    sorted[..keep]
        .iter()
        .flat_map(|(_, _, linkers)| linkers.iter().copied())
        .collect()
}

/// Picks the linker ids behind the highest-uptake half (rounded up) of the
/// frameworks with measured uptake.
pub fn highest_capacity_linkers(measured: &[(f64, MofId, [LinkerId; 8])]) -> BTreeSet<LinkerId> {
    let mut sorted: Vec<&(f64, MofId, [LinkerId; 8])> = measured.iter().collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let keep = sorted.len().div_ceil(2);
    sorted[..keep]
        .iter()
        .flat_map(|(_, _, linkers)| linkers.iter().copied())
        .collect()
}

pub struct Engine {
    partition: Partition,
    profile: StageProfile,
    quality: QualityModel,
    policy: SteeringConfig,
    bank: RngBank,
    streams: HashMap<StreamKey, ChaCha8Rng>,

    census: BTreeMap<WorkerClass, u32>,
    idle: BTreeMap<WorkerClass, BTreeSet<SlotId>>,
    busy: HashMap<SlotId, TaskId>,
    gen_nodes: BTreeSet<u32>,

    tasks: HashMap<TaskId, Prepared>,
    next_task: u64,
    next_linker: u64,
    next_mof: u64,
    queue_seq: u64,

    pools: [VecDeque<PoolLinker>; 2],
    stack: Vec<MofId>,
    heap: BinaryHeap<StableEntry>,
    pending: VecDeque<OddJob>,
    mofs: HashMap<MofId, MofMeta>,
    stable: HashMap<MofId, StableMof>,

    versions: Vec<ModelVersion>,
    model_used: BTreeSet<u32>,
    retrain_in_flight: bool,
    qualifying: Vec<(f64, MofId, [LinkerId; 8])>,
    qualify_at_last_start: u64,
    capacity_known: Vec<(f64, MofId, [LinkerId; 8])>,

    assembling: u32,
    realloc: ReallocState,
    stats: RunStats,
}

impl Engine {
    pub fn new(cfg: &RunConfig) -> Result<Engine, ConfigError> {
        let partition = cfg.validate()?;
        let mut quality = cfg.quality;
        quality.resolve();
        let census = partition.census();
        let mut idle = BTreeMap::new();
        for class in WorkerClass::ALL {
            idle.insert(class, partition.slots(class).into_iter().collect());
        }
        let gen_nodes = partition
            .slots(WorkerClass::Generator)
            .iter()
            .map(|s| s.node)
            .collect();
        Ok(Engine {
            partition,
            profile: cfg.stages.clone(),
            quality,
            policy: cfg.steering.clone(),
            bank: RngBank::new(cfg.seed),
            streams: HashMap::new(),
            census,
            idle,
            busy: HashMap::new(),
            gen_nodes,
            tasks: HashMap::new(),
            next_task: 1,
            next_linker: 1,
            next_mof: 1,
            queue_seq: 0,
            pools: [VecDeque::new(), VecDeque::new()],
            stack: Vec::new(),
            heap: BinaryHeap::new(),
            pending: VecDeque::new(),
            mofs: HashMap::new(),
            stable: HashMap::new(),
            versions: vec![ModelVersion {
                version: 1,
                quality: 0.0,
                usable_at: SimTime::ZERO,
            }],
            model_used: BTreeSet::new(),
            retrain_in_flight: false,
            qualifying: Vec::new(),
            qualify_at_last_start: 0,
            capacity_known: Vec::new(),
            assembling: 0,
            realloc: ReallocState::default(),
            stats: RunStats::default(),
        })
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn stats(&self) -> &RunStats {
        &self.stats
    }

    pub fn census(&self) -> &BTreeMap<WorkerClass, u32> {
        &self.census
    }

    /// Frameworks with measured uptake, best first.
    pub fn top_discoveries(&self, k: usize) -> Vec<(MofId, f64, f64)> {
        let mut out: Vec<(MofId, f64, f64)> = self
            .stable
            .values()
            .filter_map(|s| {
                let cap = s.record.capacity?;
                Some((s.record.id, s.record.strain.unwrap_or(f64::NAN), cap))
            })
            .collect();
        out.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        out.truncate(k);
        out
    }

    /// Finalizes backlog counters; call once after the run ends.
    pub fn finish(&mut self) -> RunStats {
        self.stats.assembled_backlog = self.stack.len();
        self.stats.pending_jobs = self.pending.len();
        let head = self.versions.last().unwrap();
        self.stats.final_version = head.version;
        self.stats.final_quality = head.quality;
        self.stats.clone()
    }

    fn rng(&mut self, stage: StageKind, slot: SlotId, usage: StreamUse) -> &mut ChaCha8Rng {
        let key = (stage.order(), slot, usage);
        let bank = &self.bank;
        self.streams
            .entry(key)
            .or_insert_with(|| bank.slot_stream(stage, slot, usage))
    }

    fn mint_task(&mut self) -> TaskId {
        let id = TaskId(self.next_task);
        self.next_task += 1;
        id
    }

    /// Emits census entries and puts every generator to work.
    pub fn bootstrap<S: EventSink>(&mut self, now: SimTime, sink: &mut S) -> Vec<PreparedTask> {
        for class in WorkerClass::ALL {
            sink.record(
                &LogEvent::at(now, EventKind::PartitionChanged)
                    .class(class)
                    .entities(vec![self.census[&class] as u64]),
            );
        }
        let generators: Vec<SlotId> = self.idle.get_mut(&WorkerClass::Generator).map_or_else(
            Vec::new,
            |set| {
                let v: Vec<SlotId> = set.iter().copied().collect();
                set.clear();
                v
            },
        );
        let mut out = Vec::new();
        for slot in generators {
            out.push(self.submit_generate(slot, now, sink));
        }
        out
    }

    fn current_model(&self, now: SimTime) -> ModelVersion {
        *self
            .versions
            .iter()
            .rev()
            .find(|v| v.usable_at <= now)
            .unwrap_or(&self.versions[0])
    }

    fn log_submit<S: EventSink>(
        &mut self,
        sink: &mut S,
        id: TaskId,
        now: SimTime,
        input_bytes: u64,
    ) {
        let prep = &self.tasks[&id];
        sink.record(
            &LogEvent::at(now, EventKind::TaskSubmitted)
                .stage(prep.stage)
                .task(id.0)
                .entities(prep.entity_ids.clone())
                .slot(prep.slot)
                .bytes(input_bytes),
        );
        sink.record(
            &LogEvent::at(now, EventKind::TaskStarted)
                .stage(prep.stage)
                .task(id.0)
                .entities(prep.entity_ids.clone())
                .slot(prep.slot),
        );
    }

    fn install<S: EventSink>(
        &mut self,
        prep: Prepared,
        now: SimTime,
        input_bytes: u64,
        sink: &mut S,
    ) -> PreparedTask {
        let id = self.mint_task();
        let out = PreparedTask {
            task_id: id,
            slot: prep.slot,
            stage: prep.stage,
            duration: prep.duration,
        };
        self.busy.insert(prep.slot, id);
        self.tasks.insert(id, prep);
        self.log_submit(sink, id, now, input_bytes);
        out
    }

    fn submit_generate<S: EventSink>(
        &mut self,
        slot: SlotId,
        now: SimTime,
        sink: &mut S,
    ) -> PreparedTask {
        let model = self.current_model(now);
        let profile = self.profile.clone();
        let count = profile.linkers_per_batch as u64;
        let first = self.next_linker;
        self.next_linker += count;
        let linkers: Vec<(LinkerId, AnchorKind)> = (first..first + count)
            .map(|i| {
                let anchor = if i % 2 == 0 {
                    AnchorKind::Bca
                } else {
                    AnchorKind::Bzn
                };
                (LinkerId(i), anchor)
            })
            .collect();
        let stage = StageKind::GenerateLinkers;
        let mean = profile.generate_batch_mean_s();
        let duration = {
            let rng = self.rng(stage, slot, StreamUse::Duration);
            SimTime::from_secs_f64(profile.sample_duration(mean, rng))
        };
        let (input_bytes, output_bytes) = {
            let rng = self.rng(stage, slot, StreamUse::Payload);
            (stages::input_bytes(stage, rng), stages::output_bytes(stage, rng))
        };
        if self.model_used.insert(model.version) {
            sink.record(
                &LogEvent::at(now, EventKind::ModelFirstUsed)
                    .stage(stage)
                    .slot(slot)
                    .entities(vec![model.version as u64])
                    .value(model.quality),
            );
        }
        let prep = Prepared {
            stage,
            slot,
            entity_ids: vec![],
            output_bytes,
            duration,
            outcome: TaskOutcome::Success,
            value: None,
            plan: Plan::Generate {
                linkers,
                quality: model.quality,
            },
        };
        self.install(prep, now, input_bytes, sink)
    }

    fn submit_process<S: EventSink>(
        &mut self,
        slot: SlotId,
        source: TaskId,
        linkers: Vec<(LinkerId, AnchorKind)>,
        batch_quality: f64,
        now: SimTime,
        sink: &mut S,
    ) -> PreparedTask {
        let stage = StageKind::ProcessLinkers;
        let profile = self.profile.clone();
        let quality = self.quality;
        let mean = profile.process_batch_mean_s(linkers.len());
        let duration = {
            let rng = self.rng(stage, slot, StreamUse::Duration);
            SimTime::from_secs_f64(profile.sample_duration(mean, rng))
        };
        let survivors: Vec<(AnchorKind, PoolLinker)> = {
            let rng = self.rng(stage, slot, StreamUse::Outcome);
            linkers
                .iter()
                .filter_map(|&(id, anchor)| {
                    if rng.gen_bool(profile.process_pass) {
                        let fitness = quality.sample_fitness(batch_quality, &mut *rng);
                        Some((anchor, PoolLinker { id, fitness }))
                    } else {
                        None
                    }
                })
                .collect()
        };
        let (input_bytes, output_bytes) = {
            let rng = self.rng(stage, slot, StreamUse::Payload);
            (stages::input_bytes(stage, rng), stages::output_bytes(stage, rng))
        };
        let prep = Prepared {
            stage,
            slot,
            entity_ids: vec![source.0],
            output_bytes,
            duration,
            outcome: TaskOutcome::Success,
            value: None,
            plan: Plan::Process { survivors },
        };
        self.install(prep, now, input_bytes, sink)
    }

    fn can_assemble(&self) -> bool {
        let parts = self.pools[0].len() >= LINKERS_PER_ANCHOR
            && self.pools[1].len() >= LINKERS_PER_ANCHOR;
        if !parts {
            return false;
        }
        match self.policy.assembly {
            AssemblyDiscipline::WorkConserving => true,
            AssemblyDiscipline::Budgeted => {
                self.assembling < assembly_budget(self.census[&WorkerClass::Validator])
            }
        }
    }

    fn submit_assemble<S: EventSink>(
        &mut self,
        slot: SlotId,
        now: SimTime,
        sink: &mut S,
    ) -> PreparedTask {
        let stage = StageKind::AssembleMofs;
        let profile = self.profile.clone();
        let mof = MofId(self.next_mof);
        self.next_mof += 1;

        let mut chosen = [LinkerId(0); 8];
        let mut fitness_sum = 0.0;
        {
            // draw four distinct linkers per anchor, uniformly from each pool
            let mut picks: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
            {
                let pool_lens = [self.pools[0].len(), self.pools[1].len()];
                let rng = self.rng(stage, slot, StreamUse::Payload);
                for (side, len) in pool_lens.into_iter().enumerate() {
                    while picks[side].len() < LINKERS_PER_ANCHOR {
                        let i = rng.gen_range(0..len);
                        if !picks[side].contains(&i) {
                            picks[side].push(i);
                        }
                    }
                }
            }
            for side in 0..2 {
                for (j, &i) in picks[side].iter().enumerate() {
                    let linker = self.pools[side][i];
                    chosen[side * LINKERS_PER_ANCHOR + j] = linker.id;
                    fitness_sum += linker.fitness;
                }
            }
        }
        let fitness = fitness_sum / 8.0;
        self.mofs.insert(
            mof,
            MofMeta {
                linkers: chosen,
                fitness,
                assembled_at: now,
            },
        );

        let duration = {
            let rng = self.rng(stage, slot, StreamUse::Duration);
            SimTime::from_secs_f64(profile.sample_duration(profile.assemble_mean_s(), rng))
        };
        let outcome = {
            let rng = self.rng(stage, slot, StreamUse::Outcome);
            if rng.gen_bool(profile.assembly_pass) {
                TaskOutcome::Success
            } else {
                TaskOutcome::ScreenedOut
            }
        };
        let (input_bytes, output_bytes) = {
            let rng = self.rng(stage, slot, StreamUse::Payload);
            (stages::input_bytes(stage, rng), stages::output_bytes(stage, rng))
        };
        self.assembling += 1;
        let prep = Prepared {
            stage,
            slot,
            entity_ids: vec![mof.0],
            output_bytes,
            duration,
            outcome,
            value: None,
            plan: Plan::Assemble { mof },
        };
        self.install(prep, now, input_bytes, sink)
    }

    fn submit_validate<S: EventSink>(
        &mut self,
        slot: SlotId,
        mof: MofId,
        now: SimTime,
        sink: &mut S,
    ) -> PreparedTask {
        let stage = StageKind::ValidateStructure;
        let profile = self.profile.clone();
        let quality = self.quality;
        let meta = self.mofs[&mof];

        let (passes_presim, strain_target) = {
            let rng = self.rng(stage, slot, StreamUse::Outcome);
            let p = rng.gen_bool(profile.presim_pass);
            let s = if p {
                Some(quality.sample_strain(meta.fitness, rng))
            } else {
                None
            };
            (p, s)
        };
        let (cells, measured) = match strain_target {
            Some(target) => {
                let rng = self.rng(stage, slot, StreamUse::Payload);
                let (reference, relaxed) = llst::synthesize_cells(target, rng);
                let measured =
                    llst::strain(&reference, &relaxed).expect("synthesized cell is invertible");
                debug_assert!((measured - target).abs() < 1e-9);
                (Some((reference, relaxed)), Some(measured))
            }
            None => (None, None),
        };
        let duration = {
            let rng = self.rng(stage, slot, StreamUse::Duration);
            let mut secs = profile.sample_duration(profile.presim_s, rng);
            if passes_presim {
                secs += profile.sample_duration(profile.stability_s, rng);
            }
            SimTime::from_secs_f64(secs)
        };
        let (input_bytes, output_bytes) = {
            let rng = self.rng(stage, slot, StreamUse::Payload);
            (stages::input_bytes(stage, rng), stages::output_bytes(stage, rng))
        };
        let outcome = match measured {
            None => TaskOutcome::ScreenedOut,
            Some(s) if s < TRAINING_STRAIN_THRESHOLD => TaskOutcome::Success,
            Some(_) => TaskOutcome::ScreenedOut,
        };
        let prep = Prepared {
            stage,
            slot,
            entity_ids: vec![mof.0],
            output_bytes,
            duration,
            outcome,
            value: measured,
            plan: Plan::Validate { mof, cells },
        };
        self.install(prep, now, input_bytes, sink)
    }

    fn submit_optimize<S: EventSink>(
        &mut self,
        slot: SlotId,
        mof: MofId,
        now: SimTime,
        sink: &mut S,
    ) -> PreparedTask {
        let stage = StageKind::OptimizeCells;
        let profile = self.profile.clone();
        let duration = {
            let rng = self.rng(stage, slot, StreamUse::Duration);
            SimTime::from_secs_f64(profile.sample_duration(profile.optimize_s, rng))
        };
        let outcome = {
            let rng = self.rng(stage, slot, StreamUse::Outcome);
            if rng.gen_bool(profile.optimize_success) {
                TaskOutcome::Success
            } else {
                TaskOutcome::Failed
            }
        };
        let (input_bytes, output_bytes) = {
            let rng = self.rng(stage, slot, StreamUse::Payload);
            (stages::input_bytes(stage, rng), stages::output_bytes(stage, rng))
        };
        let prep = Prepared {
            stage,
            slot,
            entity_ids: vec![mof.0],
            output_bytes,
            duration,
            outcome,
            value: None,
            plan: Plan::Optimize { mof },
        };
        self.install(prep, now, input_bytes, sink)
    }

    fn submit_charges<S: EventSink>(
        &mut self,
        slot: SlotId,
        mof: MofId,
        now: SimTime,
        sink: &mut S,
    ) -> PreparedTask {
        let stage = StageKind::EstimateAdsorption;
        let profile = self.profile.clone();
        let duration = {
            let rng = self.rng(stage, slot, StreamUse::Duration);
            SimTime::from_secs_f64(profile.sample_duration(profile.charges_s, rng))
        };
        let outcome = {
            let rng = self.rng(stage, slot, StreamUse::Outcome);
            if rng.gen_bool(profile.charge_failure) {
                TaskOutcome::Failed
            } else {
                TaskOutcome::Success
            }
        };
        let (input_bytes, output_bytes) = {
            let rng = self.rng(stage, slot, StreamUse::Payload);
            (stages::input_bytes(stage, rng), stages::output_bytes(stage, rng))
        };
        let prep = Prepared {
            stage,
            slot,
            entity_ids: vec![mof.0],
            output_bytes,
            duration,
            outcome,
            value: None,
            plan: Plan::Charges { mof },
        };
        self.install(prep, now, input_bytes, sink)
    }

    fn submit_adsorption<S: EventSink>(
        &mut self,
        slot: SlotId,
        mof: MofId,
        now: SimTime,
        sink: &mut S,
    ) -> PreparedTask {
        let stage = StageKind::EstimateAdsorption;
        let profile = self.profile.clone();
        let quality = self.quality;
        let stable = &self.stable[&mof];
        let strain = stable.record.strain.expect("stable framework has strain");
        let fitness = stable.fitness;
        let duration = {
            let rng = self.rng(stage, slot, StreamUse::Duration);
            SimTime::from_secs_f64(profile.sample_duration(profile.adsorption_s, rng))
        };
        let (outcome, capacity) = {
            let rng = self.rng(stage, slot, StreamUse::Outcome);
            if rng.gen_bool(profile.adsorption_success) {
                let cap = quality.sample_capacity(strain, fitness, rng);
                (TaskOutcome::Success, Some(cap))
            } else {
                (TaskOutcome::Failed, None)
            }
        };
        let (input_bytes, output_bytes) = {
            let rng = self.rng(stage, slot, StreamUse::Payload);
            (stages::input_bytes(stage, rng), stages::output_bytes(stage, rng))
        };
        let prep = Prepared {
            stage,
            slot,
            entity_ids: vec![mof.0],
            output_bytes,
            duration,
            outcome,
            value: capacity,
            plan: Plan::Adsorption { mof },
        };
        self.install(prep, now, input_bytes, sink)
    }

    fn select_training_examples(&self) -> Option<(u64, usize)> {
        let phase_two =
            self.stats.capacity_estimates >= self.policy.phase_switch_adsorptions;
        let unique = if phase_two && !self.capacity_known.is_empty() {
            highest_capacity_linkers(&self.capacity_known)
        } else {
            lowest_strain_linkers(&self.qualifying)
        };
        let n = unique.len() as u64;
        if n < self.profile.retrain_min_examples {
            return None;
        }
        Some((self.profile.clamp_examples(n), unique.len()))
    }

    fn try_submit_retrain<S: EventSink>(
        &mut self,
        now: SimTime,
        sink: &mut S,
        out: &mut Vec<PreparedTask>,
    ) {
        if !self.policy.retraining_enabled || self.retrain_in_flight {
            return;
        }
        let qualifying = self.qualifying.len() as u64;
        if qualifying < self.policy.retrain_pool_min
            || qualifying <= self.qualify_at_last_start
        {
            return;
        }
        let Some(&slot) = self.idle[&WorkerClass::Trainer].iter().next() else {
            return;
        };
        let Some((examples, _)) = self.select_training_examples() else {
            return;
        };
        self.idle.get_mut(&WorkerClass::Trainer).unwrap().remove(&slot);
        let head = *self.versions.last().unwrap();
        let new_version = head.version + 1;
        let new_quality = self.quality.improved_quality(head.quality, examples);
        let duration = SimTime::from_secs_f64(self.profile.retrain_duration_s(examples));
        let stage = StageKind::Retrain;
        let (input_bytes, output_bytes) = {
            let rng = self.rng(stage, slot, StreamUse::Payload);
            (stages::input_bytes(stage, rng), stages::output_bytes(stage, rng))
        };
        self.retrain_in_flight = true;
        self.qualify_at_last_start = qualifying;
        sink.record(
            &LogEvent::at(now, EventKind::RetrainStarted)
                .stage(stage)
                .slot(slot)
                .entities(vec![new_version as u64, examples])
                .value(head.quality),
        );
        let prep = Prepared {
            stage,
            slot,
            entity_ids: vec![new_version as u64, examples],
            output_bytes,
            duration,
            outcome: TaskOutcome::Success,
            value: Some(new_quality),
            plan: Plan::Retrain {
                examples,
                new_version,
                new_quality,
            },
        };
        out.push(self.install(prep, now, input_bytes, sink));
    }

    fn assign_validators<S: EventSink>(
        &mut self,
        now: SimTime,
        sink: &mut S,
        out: &mut Vec<PreparedTask>,
    ) {
        loop {
            if self.stack.is_empty() {
                return;
            }
            let Some(&slot) = self.idle[&WorkerClass::Validator].iter().next() else {
                return;
            };
            self.idle.get_mut(&WorkerClass::Validator).unwrap().remove(&slot);
            let mof = self.stack.pop().unwrap();
            sink.record(
                &LogEvent::at(now, EventKind::QueuePop)
                    .stage(StageKind::ValidateStructure)
                    .entities(vec![mof.0]),
            );
            out.push(self.submit_validate(slot, mof, now, sink));
        }
    }

    fn assign_optimizers<S: EventSink>(
        &mut self,
        now: SimTime,
        sink: &mut S,
        out: &mut Vec<PreparedTask>,
    ) {
        loop {
            if self.heap.is_empty() {
                return;
            }
            let Some(&slot) = self.idle[&WorkerClass::Optimizer].iter().next() else {
                return;
            };
            self.idle.get_mut(&WorkerClass::Optimizer).unwrap().remove(&slot);
            let entry = self.heap.pop().unwrap();
            sink.record(
                &LogEvent::at(now, EventKind::QueuePop)
                    .stage(StageKind::OptimizeCells)
                    .entities(vec![entry.mof.0])
                    .value(entry.strain),
            );
            out.push(self.submit_optimize(slot, entry.mof, now, sink));
        }
    }

    fn run_odd_job<S: EventSink>(
        &mut self,
        slot: SlotId,
        job: OddJob,
        now: SimTime,
        sink: &mut S,
    ) -> PreparedTask {
        match job {
            OddJob::Process {
                source,
                linkers,
                batch_quality,
            } => self.submit_process(slot, source, linkers, batch_quality, now, sink),
            OddJob::Charges { mof } => self.submit_charges(slot, mof, now, sink),
        }
    }

    /// Puts one freed scavenger back to work: queued jobs first, then
    /// assembly if the discipline admits it.
    fn assign_scavenger<S: EventSink>(
        &mut self,
        slot: SlotId,
        now: SimTime,
        sink: &mut S,
        out: &mut Vec<PreparedTask>,
    ) {
        if let Some(job) = self.pending.pop_front() {
            out.push(self.run_odd_job(slot, job, now, sink));
        } else if self.can_assemble() {
            out.push(self.submit_assemble(slot, now, sink));
        } else {
            self.idle.get_mut(&WorkerClass::Scavenger).unwrap().insert(slot);
        }
    }

    /// Wakes every idle scavenger that has something to do.
    fn drain_scavengers<S: EventSink>(
        &mut self,
        now: SimTime,
        sink: &mut S,
        out: &mut Vec<PreparedTask>,
    ) {
        loop {
            if self.pending.is_empty() && !self.can_assemble() {
                return;
            }
            let Some(&slot) = self.idle[&WorkerClass::Scavenger].iter().next() else {
                return;
            };
            self.idle.get_mut(&WorkerClass::Scavenger).unwrap().remove(&slot);
            if let Some(job) = self.pending.pop_front() {
                out.push(self.run_odd_job(slot, job, now, sink));
            } else {
                out.push(self.submit_assemble(slot, now, sink));
            }
        }
    }

    /// Logs completion and tells the backend when to echo back.
    pub fn complete<S: EventSink>(
        &mut self,
        id: TaskId,
        now: SimTime,
        sink: &mut S,
    ) -> CompletionTiming {
        let prep = self.tasks.get(&id).expect("completion for unknown task");
        let stage = prep.stage;
        let outcome = prep.outcome;
        let value = prep.value;
        let output_bytes = prep.output_bytes;
        let slot = prep.slot;
        let entity_ids = prep.entity_ids.clone();

        sink.record(
            &LogEvent::at(now, EventKind::TaskCompleted)
                .stage(stage)
                .task(id.0)
                .entities(entity_ids.clone())
                .slot(slot)
                .bytes(output_bytes)
                .outcome(outcome)
                .value_opt(value),
        );
        *self.stats.completed.entry(stage).or_default() += 1;
        if outcome == TaskOutcome::Success {
            *self.stats.succeeded.entry(stage).or_default() += 1;
        }
        if stage == StageKind::ValidateStructure {
            if let Some(s) = value {
                self.stats.stability_evaluated += 1;
                if s < STRICT_STRAIN_THRESHOLD {
                    self.stats.strict_hits += 1;
                }
                if s < TRAINING_STRAIN_THRESHOLD {
                    self.stats.training_hits += 1;
                }
            }
        }
        if stage == StageKind::Retrain {
            if let Plan::Retrain {
                examples,
                new_version,
                new_quality,
            } = self.tasks[&id].plan
            {
                self.stats.retrains += 1;
                let usable_at = now
                    .plus_secs_f64(stages::transfer_time_s(output_bytes))
                    .plus_secs_f64(PAYLOAD_LATENCY_S);
                self.versions.push(ModelVersion {
                    version: new_version,
                    quality: new_quality,
                    usable_at,
                });
                sink.record(
                    &LogEvent::at(now, EventKind::RetrainFinished)
                        .stage(stage)
                        .task(id.0)
                        .entities(vec![new_version as u64, examples])
                        .value(new_quality),
                );
            }
        }
        CompletionTiming {
            decision_at: now.plus_secs_f64(CONTROL_LATENCY_S),
            payload_at: now
                .plus_secs_f64(stages::transfer_time_s(output_bytes))
                .plus_secs_f64(PAYLOAD_LATENCY_S),
        }
    }

    /// Frees the slot (or chains follow-up work onto it) once the control
    /// plane hears about the completion.
    pub fn decide<S: EventSink>(
        &mut self,
        id: TaskId,
        now: SimTime,
        sink: &mut S,
    ) -> Vec<PreparedTask> {
        let mut out = Vec::new();
        let (stage, slot, outcome, mof_of_interest) = {
            let prep = self.tasks.get(&id).expect("decision for unknown task");
            let mof = match prep.plan {
                Plan::Assemble { mof }
                | Plan::Validate { mof, .. }
                | Plan::Optimize { mof }
                | Plan::Charges { mof }
                | Plan::Adsorption { mof } => Some(mof),
                _ => None,
            };
            (prep.stage, prep.slot, prep.outcome, mof)
        };
        self.busy.remove(&slot);

        if stage == StageKind::AssembleMofs {
            self.assembling = self.assembling.saturating_sub(1);
            if outcome != TaskOutcome::Success {
                self.mofs.remove(&mof_of_interest.unwrap());
            }
        }

        // chained second half of an uptake estimate: same slot, no idling
        if stage == StageKind::EstimateAdsorption {
            if let Plan::Charges { mof } = self.tasks[&id].plan {
                if outcome == TaskOutcome::Success {
                    out.push(self.submit_adsorption(slot, mof, now, sink));
                    self.after_decision(now, sink, &mut out);
                    return out;
                }
                self.discard_stable(mof, now);
            }
        }

        match stage {
            StageKind::OptimizeCells => {
                if outcome != TaskOutcome::Success {
                    self.discard_stable(mof_of_interest.unwrap(), now);
                }
            }
            StageKind::EstimateAdsorption => {
                if let Plan::Adsorption { mof } = self.tasks[&id].plan {
                    self.resolve_adsorption(mof, id, now);
                }
            }
            StageKind::Retrain => {
                self.retrain_in_flight = false;
            }
            _ => {}
        }

        if self.retire_if_draining(slot, now, sink, &mut out) {
            self.after_decision(now, sink, &mut out);
            return out;
        }

        match slot.class {
            WorkerClass::Generator => {
                out.push(self.submit_generate(slot, now, sink));
            }
            WorkerClass::Validator => {
                self.idle.get_mut(&WorkerClass::Validator).unwrap().insert(slot);
                self.assign_validators(now, sink, &mut out);
            }
            WorkerClass::Scavenger => {
                self.assign_scavenger(slot, now, sink, &mut out);
            }
            WorkerClass::Optimizer => {
                self.idle.get_mut(&WorkerClass::Optimizer).unwrap().insert(slot);
                self.assign_optimizers(now, sink, &mut out);
            }
            WorkerClass::Trainer => {
                self.idle.get_mut(&WorkerClass::Trainer).unwrap().insert(slot);
            }
        }
        self.after_decision(now, sink, &mut out);
        out
    }

    fn resolve_adsorption(&mut self, mof: MofId, id: TaskId, now: SimTime) {
        let (outcome, capacity) = {
            let prep = &self.tasks[&id];
            (prep.outcome, prep.value)
        };
        if outcome == TaskOutcome::Success {
            let cap = capacity.expect("successful estimate carries uptake");
            self.stats.capacity_estimates += 1;
            if let Some(stable) = self.stable.get_mut(&mof) {
                stable.record.capacity = Some(cap);
                let _ = stable.record.advance(MofStage::CapacityKnown, now);
                self.capacity_known.push((cap, mof, stable.record_linkers()));
            }
        } else {
            self.discard_stable(mof, now);
        }
    }

    fn discard_stable(&mut self, mof: MofId, now: SimTime) {
        if let Some(mut s) = self.stable.remove(&mof) {
            let _ = s.record.advance(MofStage::Discarded, now);
        }
    }

    /// Fabric-side effects once a task's output payload is usable.
    pub fn payload<S: EventSink>(
        &mut self,
        id: TaskId,
        now: SimTime,
        sink: &mut S,
    ) -> Vec<PreparedTask> {
        let mut out = Vec::new();
        let prep = self.tasks.remove(&id).expect("payload for unknown task");
        sink.record(
            &LogEvent::at(now, EventKind::PayloadReady)
                .stage(prep.stage)
                .task(id.0)
                .entities(prep.entity_ids.clone())
                .slot(prep.slot)
                .bytes(prep.output_bytes),
        );
        match prep.plan {
            Plan::Generate { linkers, quality } => {
                self.pending.push_back(OddJob::Process {
                    source: id,
                    linkers,
                    batch_quality: quality,
                });
                self.drain_scavengers(now, sink, &mut out);
            }
            Plan::Process { survivors } => {
                for (anchor, linker) in survivors {
                    let pool = &mut self.pools[anchor_index(anchor)];
                    pool.push_back(linker);
                    while pool.len() > self.policy.linker_pool_bound {
                        pool.pop_front();
                    }
                }
                self.drain_scavengers(now, sink, &mut out);
            }
            Plan::Assemble { mof } => {
                if prep.outcome == TaskOutcome::Success {
                    self.stack.push(mof);
                    sink.record(
                        &LogEvent::at(now, EventKind::QueuePush)
                            .stage(StageKind::ValidateStructure)
                            .entities(vec![mof.0]),
                    );
                    self.assign_validators(now, sink, &mut out);
                }
            }
            Plan::Validate { mof, cells } => {
                let meta = self.mofs.remove(&mof).expect("validated framework has meta");
                if prep.outcome == TaskOutcome::Success {
                    let strain = prep.value.expect("stable framework has strain");
                    let (reference, relaxed) = cells.expect("stability run synthesized cells");
                    let mut record =
                        MofRecord::new(mof, meta.linkers.to_vec(), reference, meta.assembled_at);
                    record.cell_final = Some(relaxed);
                    record.strain = Some(strain);
                    let _ = record.advance(MofStage::StabilityKnown, now);
                    self.stable.insert(
                        mof,
                        StableMof {
                            record,
                            fitness: meta.fitness,
                        },
                    );
                    self.qualifying.push((strain, mof, meta.linkers));
                    self.queue_seq += 1;
                    self.heap.push(StableEntry {
                        strain,
                        seq: self.queue_seq,
                        mof,
                    });
                    sink.record(
                        &LogEvent::at(now, EventKind::QueuePush)
                            .stage(StageKind::OptimizeCells)
                            .entities(vec![mof.0])
                            .value(strain),
                    );
                    self.assign_optimizers(now, sink, &mut out);
                    self.try_submit_retrain(now, sink, &mut out);
                }
            }
            Plan::Optimize { mof } => {
                if prep.outcome == TaskOutcome::Success {
                    if let Some(stable) = self.stable.get_mut(&mof) {
                        let _ = stable.record.advance(MofStage::CellOptimized, now);
                    }
                    self.pending.push_back(OddJob::Charges { mof });
                    self.drain_scavengers(now, sink, &mut out);
                }
            }
            Plan::Charges { mof } => {
                if prep.outcome == TaskOutcome::Success {
                    if let Some(stable) = self.stable.get_mut(&mof) {
                        let _ = stable.record.advance(MofStage::ChargesKnown, now);
                    }
                }
            }
            Plan::Adsorption { .. } => {}
            Plan::Retrain { .. } => {
                self.try_submit_retrain(now, sink, &mut out);
            }
        }
        self.after_decision(now, sink, &mut out);
        out
    }

    fn after_decision<S: EventSink>(
        &mut self,
        now: SimTime,
        sink: &mut S,
        out: &mut Vec<PreparedTask>,
    ) {
        self.check_realloc(now, sink, out);
    }

    fn retire_if_draining<S: EventSink>(
        &mut self,
        slot: SlotId,
        now: SimTime,
        sink: &mut S,
        out: &mut Vec<PreparedTask>,
    ) -> bool {
        let Some(&(to, remaining)) = self.realloc.draining.get(&slot.node) else {
            return false;
        };
        let source = match to {
            WorkerClass::Validator => WorkerClass::Generator,
            WorkerClass::Generator => WorkerClass::Validator,
            _ => return false,
        };
        if slot.class != source {
            return false;
        }
        if remaining <= 1 {
            self.realloc.draining.remove(&slot.node);
            self.finalize_drain(slot.node, to, now, sink, out);
        } else {
            self.realloc.draining.insert(slot.node, (to, remaining - 1));
        }
        true
    }

    fn finalize_drain<S: EventSink>(
        &mut self,
        node: u32,
        to: WorkerClass,
        now: SimTime,
        sink: &mut S,
        out: &mut Vec<PreparedTask>,
    ) {
        let gen_lanes = self.partition.generator_lanes_per_node();
        let val_lanes = self.partition.validator_lanes_per_node();
        let (from, from_lanes, to_lanes) = match to {
            WorkerClass::Validator => (WorkerClass::Generator, gen_lanes, val_lanes),
            _ => (WorkerClass::Validator, val_lanes, gen_lanes),
        };
        *self.census.get_mut(&from).unwrap() -= from_lanes;
        *self.census.get_mut(&to).unwrap() += to_lanes;
        sink.record(
            &LogEvent::at(now, EventKind::PartitionChanged)
                .class(from)
                .entities(vec![self.census[&from] as u64]),
        );
        sink.record(
            &LogEvent::at(now, EventKind::PartitionChanged)
                .class(to)
                .entities(vec![self.census[&to] as u64]),
        );
        let new_slots: Vec<SlotId> = (0..to_lanes)
            .map(|lane| SlotId {
                class: to,
                node,
                lane: lane as u8,
            })
            .collect();
        match to {
            WorkerClass::Validator => {
                self.realloc.donated.push(node);
                self.idle.get_mut(&to).unwrap().extend(new_slots);
                self.assign_validators(now, sink, out);
            }
            _ => {
                self.gen_nodes.insert(node);
                for slot in new_slots {
                    out.push(self.submit_generate(slot, now, sink));
                }
            }
        }
    }

    fn start_drain(&mut self, node: u32, from: WorkerClass, to: WorkerClass) -> bool {
        let lanes = match from {
            WorkerClass::Generator => self.partition.generator_lanes_per_node(),
            _ => self.partition.validator_lanes_per_node(),
        };
        let mut remaining = lanes;
        for lane in 0..lanes {
            let slot = SlotId {
                class: from,
                node,
                lane: lane as u8,
            };
            if self.idle.get_mut(&from).unwrap().remove(&slot) {
                remaining -= 1;
            }
        }
        if remaining == 0 {
            // every lane was idle; finalize on the next realloc tick via a
            // zero-lane drain marker would stall, so mark one synthetic lane
            self.realloc.draining.insert(node, (to, 0));
            true
        } else {
            self.realloc.draining.insert(node, (to, remaining));
            true
        }
    }

    fn check_realloc<S: EventSink>(
        &mut self,
        now: SimTime,
        sink: &mut S,
        out: &mut Vec<PreparedTask>,
    ) {
        let cfg = self.policy.reallocation;
        if !cfg.enabled {
            return;
        }
        // finalize any drain whose lanes were all idle at the start
        let ready: Vec<(u32, WorkerClass)> = self
            .realloc
            .draining
            .iter()
            .filter(|(_, &(_, remaining))| remaining == 0)
            .map(|(&node, &(to, _))| (node, to))
            .collect();
        for (node, to) in ready {
            self.realloc.draining.remove(&node);
            self.finalize_drain(node, to, now, sink, out);
        }
        if !self.realloc.draining.is_empty() {
            return;
        }
        let depth = self.stack.len() as f64;
        let threshold = cfg.stack_depth_factor * self.census[&WorkerClass::Validator] as f64;
        if depth > threshold {
            self.realloc.empty_since = None;
            let since = *self.realloc.over_since.get_or_insert(now);
            if now.as_secs_f64() - since.as_secs_f64() >= cfg.sustain_s
                && self.gen_nodes.len() > cfg.min_generator_nodes as usize
            {
                self.realloc.over_since = None;
                if let Some(&node) = self.gen_nodes.iter().next_back() {
                    self.gen_nodes.remove(&node);
                    self.start_drain(node, WorkerClass::Generator, WorkerClass::Validator);
                }
            }
        } else if self.stack.is_empty() {
            self.realloc.over_since = None;
            let since = *self.realloc.empty_since.get_or_insert(now);
            if now.as_secs_f64() - since.as_secs_f64() >= cfg.sustain_s
                && !self.realloc.donated.is_empty()
            {
                self.realloc.empty_since = None;
                let node = self.realloc.donated.pop().unwrap();
                self.start_drain(node, WorkerClass::Validator, WorkerClass::Generator);
            }
        } else {
            self.realloc.over_since = None;
            self.realloc.empty_since = None;
        }
    }
}

impl StableMof {
    fn record_linkers(&self) -> [LinkerId; 8] {
        let mut arr = [LinkerId(0); 8];
        for (i, id) in self.record.linker_ids.iter().take(8).enumerate() {
            arr[i] = *id;
        }
        arr
    }
}

impl LogEvent {
    fn value_opt(self, value: Option<f64>) -> Self {
        match value {
            Some(v) => self.value(v),
            None => self,
        }
    }
}
