//! Event-log auditor: replays a log and checks the invariants the engine
//! is supposed to uphold, independent of the engine's own bookkeeping.

use std::collections::{HashMap, HashSet};

use crate::domain::{SlotId, StageKind, TaskOutcome, WorkerClass, TRAINING_STRAIN_THRESHOLD};
use crate::telemetry::{EventKind, LogEvent};

#[derive(Debug, Default)]
pub struct AuditReport {
    pub violations: Vec<String>,
    pub events_checked: usize,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

struct Auditor {
    report: AuditReport,
    retrain_pool_min: u64,
    last_time: f64,
    busy: HashMap<SlotId, u64>,
    census: HashMap<WorkerClass, i64>,
    in_flight: HashMap<WorkerClass, i64>,
    submitted: HashSet<u64>,
    stack: Vec<u64>,
    heap: Vec<(f64, u64, u64)>,
    heap_seq: u64,
    qualifying: u64,
    retrain_active: bool,
    last_version: u64,
    finished_versions: HashSet<u64>,
    estimate_starts: HashMap<u64, u8>,
    chain_expect: HashMap<SlotId, u64>,
}

impl Auditor {
    fn new(retrain_pool_min: u64) -> Self {
        Auditor {
            report: AuditReport::default(),
            retrain_pool_min,
            last_time: 0.0,
            busy: HashMap::new(),
            census: HashMap::new(),
            in_flight: HashMap::new(),
            submitted: HashSet::new(),
            stack: Vec::new(),
            heap: Vec::new(),
            heap_seq: 0,
            qualifying: 0,
            retrain_active: false,
            last_version: 1,
            finished_versions: HashSet::new(),
            estimate_starts: HashMap::new(),
            chain_expect: HashMap::new(),
        }
    }

    fn flag(&mut self, t: f64, msg: String) {
        self.report.violations.push(format!("t={t:.6}: {msg}"));
    }

    fn on_started(&mut self, e: &LogEvent) {
        let t = e.time;
        let Some(slot) = e.slot_id else {
            self.flag(t, "task started without a slot".into());
            return;
        };
        if let Some(prev) = self.busy.insert(slot, e.task_id.unwrap_or(0)) {
            self.flag(t, format!("slot {slot} started a task while task {prev} still runs"));
        }
        let class = slot.class;
        let running = {
            let r = self.in_flight.entry(class).or_default();
            *r += 1;
            *r
        };
        let offered = self.census.get(&class).copied().unwrap_or(0);
        if running > offered {
            self.flag(t, format!("{running} {class} tasks in flight but census is {offered}"));
        }
        if let Some(mof) = self.chain_expect.remove(&slot) {
            let same_entity = e.entity_ids.first() == Some(&mof);
            let is_estimate = e.stage == Some(StageKind::EstimateAdsorption);
            if !(same_entity && is_estimate) {
                self.flag(
                    t,
                    format!("slot {slot} should have chained the uptake run for entity {mof}"),
                );
            }
        }
        if e.stage == Some(StageKind::EstimateAdsorption) {
            if let Some(&mof) = e.entity_ids.first() {
                *self.estimate_starts.entry(mof).or_default() += 1;
            }
        }
        if e.stage == Some(StageKind::Retrain) {
            if self.retrain_active {
                self.flag(t, "retraining started while another retrain runs".into());
            }
            if self.qualifying < self.retrain_pool_min {
                self.flag(
                    t,
                    format!(
                        "retraining started with {} qualifying frameworks, needs {}",
                        self.qualifying, self.retrain_pool_min
                    ),
                );
            }
            self.retrain_active = true;
        }
    }

    fn on_completed(&mut self, e: &LogEvent) {
        let t = e.time;
        let Some(slot) = e.slot_id else {
            self.flag(t, "task completed without a slot".into());
            return;
        };
        if self.busy.remove(&slot).is_none() {
            self.flag(t, format!("slot {slot} completed a task it never started"));
        } else {
            *self.in_flight.entry(slot.class).or_default() -= 1;
        }
        match e.stage {
            Some(StageKind::ValidateStructure) => {
                if let Some(strain) = e.value {
                    if strain < TRAINING_STRAIN_THRESHOLD {
                        self.qualifying += 1;
                    }
                }
            }
            Some(StageKind::EstimateAdsorption) => {
                if let Some(&mof) = e.entity_ids.first() {
                    let leg = self.estimate_starts.get(&mof).copied().unwrap_or(0);
                    if leg == 1 && e.outcome == Some(TaskOutcome::Success) {
                        self.chain_expect.insert(slot, mof);
                    }
                }
            }
            Some(StageKind::Retrain) => {
                self.retrain_active = false;
            }
            _ => {}
        }
    }

    fn on_queue_push(&mut self, e: &LogEvent) {
        let Some(&id) = e.entity_ids.first() else {
            self.flag(e.time, "queue push without an entity".into());
            return;
        };
        match e.stage {
            Some(StageKind::ValidateStructure) => self.stack.push(id),
            Some(StageKind::OptimizeCells) => {
                let Some(strain) = e.value else {
                    self.flag(e.time, "ranked queue push without a key".into());
                    return;
                };
                self.heap_seq += 1;
                self.heap.push((strain, self.heap_seq, id));
            }
            other => self.flag(e.time, format!("queue push for unexpected stage {other:?}")),
        }
    }

    fn on_queue_pop(&mut self, e: &LogEvent) {
        let t = e.time;
        let got = e.entity_ids.first().copied();
        match e.stage {
            Some(StageKind::ValidateStructure) => match self.stack.pop() {
                None => self.flag(t, "pop from empty assembly stack".into()),
                Some(top) => {
                    if got != Some(top) {
                        self.flag(
                            t,
                            format!("assembly stack is LIFO: expected {top}, popped {got:?}"),
                        );
                    }
                }
            },
            Some(StageKind::OptimizeCells) => {
                if self.heap.is_empty() {
                    self.flag(t, "pop from empty ranked queue".into());
                    return;
                }
                // lowest strain wins; equal strains resolve to the latest push
                let (best_idx, _) = self
                    .heap
                    .iter()
                    .enumerate()
                    .min_by(|(_, a), (_, b)| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
                    .expect("non-empty");
                let (strain, _, id) = self.heap.remove(best_idx);
                if got != Some(id) {
                    self.flag(
                        t,
                        format!("ranked queue must pop entity {id} (strain {strain}), popped {got:?}"),
                    );
                } else if e.value != Some(strain) {
                    self.flag(
                        t,
                        format!("ranked pop reports key {:?}, expected {strain}", e.value),
                    );
                }
            }
            other => self.flag(t, format!("queue pop for unexpected stage {other:?}")),
        }
    }

    fn record(&mut self, e: &LogEvent) {
        self.report.events_checked += 1;
        if e.time < self.last_time {
            self.flag(e.time, format!("time went backwards from {:.6}", self.last_time));
        }
        self.last_time = self.last_time.max(e.time);
        match e.kind {
            EventKind::TaskSubmitted => {
                if let Some(id) = e.task_id {
                    if !self.submitted.insert(id) {
                        self.flag(e.time, format!("task id {id} submitted twice"));
                    }
                }
            }
            EventKind::TaskStarted => self.on_started(e),
            EventKind::TaskCompleted => self.on_completed(e),
            EventKind::QueuePush => self.on_queue_push(e),
            EventKind::QueuePop => self.on_queue_pop(e),
            EventKind::PartitionChanged => {
                if let (Some(class), Some(&count)) = (e.class, e.entity_ids.first()) {
                    self.census.insert(class, count as i64);
                }
            }
            EventKind::RetrainFinished => {
                let Some(&version) = e.entity_ids.first() else {
                    self.flag(e.time, "retrain finished without a version".into());
                    return;
                };
                if version <= self.last_version {
                    self.flag(
                        e.time,
                        format!("model version {version} not above {}", self.last_version),
                    );
                }
                self.last_version = self.last_version.max(version);
                self.finished_versions.insert(version);
            }
            EventKind::ModelFirstUsed => {
                if let Some(&version) = e.entity_ids.first() {
                    if version > 1 && !self.finished_versions.contains(&version) {
                        self.flag(
                            e.time,
                            format!("model version {version} used before its retrain finished"),
                        );
                    }
                }
            }
            EventKind::PayloadReady | EventKind::RetrainStarted => {}
        }
    }
}

/// Checks a whole log. `retrain_pool_min` is the configured minimum number
/// of strain verdicts required before the first retraining may launch.
pub fn audit_log(events: &[LogEvent], retrain_pool_min: u64) -> AuditReport {
    let mut auditor = Auditor::new(retrain_pool_min);
    for e in events {
        auditor.record(e);
    }
    auditor.report
}
