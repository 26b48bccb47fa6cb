//! Run metrics. Every number is a pure function of the event log.
//!
//! `MetricsSink` aggregates online so large runs need not retain their
//! events; the free functions replay a retained log through the same
//! accumulator, so offline and online analysis cannot disagree.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::domain::{SlotId, StageKind, TaskOutcome, WorkerClass, STRICT_STRAIN_THRESHOLD};
use crate::telemetry::{EventKind, EventSink, LogEvent};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("not enough data: {0}")]
    NotEnoughData(String),
}

/// Half-open observation window in seconds, `(start, end)`.
pub type Window = (f64, f64);

/// The cross-stage handoffs whose latency characterizes steering overhead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HandoffKind {
    /// Generation batch completed -> its processed survivors usable.
    ProcessedLinkers,
    /// Retraining finished -> first generation batch under the new model.
    ModelAdoption,
    /// Cell optimization completed -> charge estimation started.
    ChargesStart,
    /// Validation completed -> its verdict payload usable.
    ValidatePayload,
    /// Charge estimation completed -> uptake run started on the same slot.
    AdsorptionChain,
}

impl HandoffKind {
    pub const ALL: [HandoffKind; 5] = [
        HandoffKind::ProcessedLinkers,
        HandoffKind::ModelAdoption,
        HandoffKind::ChargesStart,
        HandoffKind::ValidatePayload,
        HandoffKind::AdsorptionChain,
    ];
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LatencySummary {
    pub count: usize,
    pub mean: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn summarize(samples: &[f64]) -> Option<LatencySummary> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(LatencySummary {
        count: sorted.len(),
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        p25: percentile(&sorted, 0.25),
        p50: percentile(&sorted, 0.50),
        p75: percentile(&sorted, 0.75),
    })
}

fn overlap(start: f64, end: f64, window: Window) -> f64 {
    (end.min(window.1) - start.max(window.0)).max(0.0)
}

#[derive(Debug, Default, Clone, Copy)]
struct SlopeAcc {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    sxy: f64,
}

impl SlopeAcc {
    fn push(&mut self, x: f64, y: f64) {
        self.n += 1.0;
        self.sx += x;
        self.sy += y;
        self.sxx += x * x;
        self.sxy += x * y;
    }

    fn slope(&self) -> Option<f64> {
        let denom = self.n * self.sxx - self.sx * self.sx;
        if self.n < 2.0 || denom <= 0.0 {
            return None;
        }
        Some((self.n * self.sxy - self.sx * self.sy) / denom)
    }
}

/// Online metrics accumulator. Utilization and throughput are confined to
/// the window given at construction; latency pairing and the discovery
/// curve always cover the whole run.
#[derive(Debug)]
pub struct MetricsSink {
    window: Window,
    census: BTreeMap<WorkerClass, Vec<(f64, u32)>>,
    busy_closed: BTreeMap<WorkerClass, f64>,
    open_since: HashMap<SlotId, f64>,
    completions: BTreeMap<StageKind, u64>,
    slopes: BTreeMap<StageKind, SlopeAcc>,
    latencies: BTreeMap<HandoffKind, Vec<f64>>,
    // pairing state
    generate_done: HashMap<u64, f64>,
    retrain_done: HashMap<u64, f64>,
    optimize_done: HashMap<u64, f64>,
    validate_done: HashMap<u64, f64>,
    estimate_starts: HashMap<u64, (u8, f64)>,
    chain_pending: HashMap<u64, f64>,
    strict_times: Vec<f64>,
    stability_evaluated: u64,
}

impl MetricsSink {
    pub fn new(window: Window) -> Self {
        MetricsSink {
            window,
            census: BTreeMap::new(),
            busy_closed: BTreeMap::new(),
            open_since: HashMap::new(),
            completions: BTreeMap::new(),
            slopes: BTreeMap::new(),
            latencies: BTreeMap::new(),
            generate_done: HashMap::new(),
            retrain_done: HashMap::new(),
            optimize_done: HashMap::new(),
            validate_done: HashMap::new(),
            estimate_starts: HashMap::new(),
            chain_pending: HashMap::new(),
            strict_times: Vec::new(),
            stability_evaluated: 0,
        }
    }

    pub fn window(&self) -> Window {
        self.window
    }

    fn on_started(&mut self, e: &LogEvent) {
        if let Some(slot) = e.slot_id {
            self.open_since.insert(slot, e.time);
        }
        if e.stage == Some(StageKind::EstimateAdsorption) {
            let Some(&mof) = e.entity_ids.first() else {
                return;
            };
            let entry = self.estimate_starts.entry(mof).or_insert((0, e.time));
            entry.0 += 1;
            match entry.0 {
                1 => {
                    if let Some(t0) = self.optimize_done.remove(&mof) {
                        self.latencies
                            .entry(HandoffKind::ChargesStart)
                            .or_default()
                            .push(e.time - t0);
                    }
                }
                2 => {
                    if let Some(t0) = self.chain_pending.remove(&mof) {
                        self.latencies
                            .entry(HandoffKind::AdsorptionChain)
                            .or_default()
                            .push(e.time - t0);
                    }
                }
                _ => {}
            }
        }
    }

    fn on_completed(&mut self, e: &LogEvent) {
        if let Some(slot) = e.slot_id {
            if let Some(start) = self.open_since.remove(&slot) {
                *self.busy_closed.entry(slot.class).or_default() +=
                    overlap(start, e.time, self.window);
            }
        }
        let Some(stage) = e.stage else { return };
        let total = self.completions.entry(stage).or_default();
        *total += 1;
        if e.time >= self.window.0 && e.time <= self.window.1 {
            let y = *total as f64;
            self.slopes
                .entry(stage)
                .or_default()
                .push(e.time - self.window.0, y);
        }
        let task = e.task_id.unwrap_or(0);
        let entity = e.entity_ids.first().copied();
        match stage {
            StageKind::GenerateLinkers => {
                self.generate_done.insert(task, e.time);
            }
            StageKind::ValidateStructure => {
                self.validate_done.insert(task, e.time);
                if let Some(strain) = e.value {
                    self.stability_evaluated += 1;
                    if strain < STRICT_STRAIN_THRESHOLD {
                        self.strict_times.push(e.time);
                    }
                }
            }
            StageKind::OptimizeCells => {
                if e.outcome == Some(TaskOutcome::Success) {
                    if let Some(mof) = entity {
                        self.optimize_done.insert(mof, e.time);
                    }
                }
            }
            StageKind::EstimateAdsorption => {
                if let Some(mof) = entity {
                    let leg = self.estimate_starts.get(&mof).map_or(0, |s| s.0);
                    if leg == 1 && e.outcome == Some(TaskOutcome::Success) {
                        self.chain_pending.insert(mof, e.time);
                    }
                }
            }
            _ => {}
        }
    }

    fn on_payload(&mut self, e: &LogEvent) {
        match e.stage {
            Some(StageKind::ProcessLinkers) => {
                if let Some(&src) = e.entity_ids.first() {
                    if let Some(t0) = self.generate_done.remove(&src) {
                        self.latencies
                            .entry(HandoffKind::ProcessedLinkers)
                            .or_default()
                            .push(e.time - t0);
                    }
                }
            }
            Some(StageKind::ValidateStructure) => {
                if let Some(task) = e.task_id {
                    if let Some(t0) = self.validate_done.remove(&task) {
                        self.latencies
                            .entry(HandoffKind::ValidatePayload)
                            .or_default()
                            .push(e.time - t0);
                    }
                }
            }
            _ => {}
        }
    }

    /// Slot-seconds this class offered inside the window.
    fn offered(&self, class: WorkerClass) -> f64 {
        let Some(timeline) = self.census.get(&class) else {
            return 0.0;
        };
        let mut total = 0.0;
        for (i, &(t, n)) in timeline.iter().enumerate() {
            let end = timeline.get(i + 1).map_or(self.window.1, |&(t2, _)| t2);
            total += n as f64 * overlap(t, end, self.window);
        }
        total
    }

    /// Fraction of offered slot-seconds spent running tasks, within the
    /// window. Slots still busy at the window end count up to its edge.
    pub fn busy_fraction(&self, class: WorkerClass) -> f64 {
        let offered = self.offered(class);
        if offered <= 0.0 {
            return 0.0;
        }
        let mut busy = self.busy_closed.get(&class).copied().unwrap_or(0.0);
        for (slot, &start) in &self.open_since {
            if slot.class == class {
                busy += overlap(start, self.window.1, self.window);
            }
        }
        busy / offered
    }

    /// Completions per hour from the least-squares slope of the cumulative
    /// completion count over the window.
    pub fn sustained_throughput(&self, stage: StageKind) -> Result<f64, MetricsError> {
        self.slopes
            .get(&stage)
            .and_then(SlopeAcc::slope)
            .map(|s| s * 3600.0)
            .ok_or_else(|| {
                MetricsError::NotEnoughData(format!(
                    "fewer than two {stage} completions in the window"
                ))
            })
    }

    pub fn completions(&self, stage: StageKind) -> u64 {
        self.completions.get(&stage).copied().unwrap_or(0)
    }

    pub fn latency_summary(&self, kind: HandoffKind) -> Option<LatencySummary> {
        summarize(self.latencies.get(&kind).map_or(&[][..], Vec::as_slice))
    }

    pub fn handoff_latencies(&self) -> BTreeMap<HandoffKind, LatencySummary> {
        HandoffKind::ALL
            .into_iter()
            .filter_map(|k| self.latency_summary(k).map(|s| (k, s)))
            .collect()
    }

    /// Cumulative confirmed-hit curve: (time, hits so far).
    pub fn discovery_curve(&self) -> Vec<(f64, u64)> {
        self.strict_times
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, i as u64 + 1))
            .collect()
    }

    pub fn strict_hits(&self) -> u64 {
        self.strict_times.len() as u64
    }

    pub fn strict_hits_in(&self, window: Window) -> u64 {
        self.strict_times
            .iter()
            .filter(|&&t| t >= window.0 && t <= window.1)
            .count() as u64
    }

    pub fn stability_evaluated(&self) -> u64 {
        self.stability_evaluated
    }

    /// Confirmed hits over stability verdicts, cumulative for the run.
    pub fn strict_fraction(&self) -> Option<f64> {
        if self.stability_evaluated == 0 {
            return None;
        }
        Some(self.strict_times.len() as f64 / self.stability_evaluated as f64)
    }
}

impl EventSink for MetricsSink {
    fn record(&mut self, e: &LogEvent) {
        match e.kind {
            EventKind::PartitionChanged => {
                if let (Some(class), Some(&count)) = (e.class, e.entity_ids.first()) {
                    self.census
                        .entry(class)
                        .or_default()
                        .push((e.time, count as u32));
                }
            }
            EventKind::TaskStarted => self.on_started(e),
            EventKind::TaskCompleted => self.on_completed(e),
            EventKind::PayloadReady => self.on_payload(e),
            EventKind::RetrainFinished => {
                if let Some(&version) = e.entity_ids.first() {
                    self.retrain_done.insert(version, e.time);
                }
            }
            EventKind::ModelFirstUsed => {
                if let Some(&version) = e.entity_ids.first() {
                    if let Some(t0) = self.retrain_done.remove(&version) {
                        self.latencies
                            .entry(HandoffKind::ModelAdoption)
                            .or_default()
                            .push(e.time - t0);
                    }
                }
            }
            _ => {}
        }
    }
}

/// Replays a retained log through a fresh accumulator.
pub fn replay(events: &[LogEvent], window: Window) -> MetricsSink {
    let mut sink = MetricsSink::new(window);
    for e in events {
        sink.record(e);
    }
    sink
}

pub fn busy_fraction(events: &[LogEvent], class: WorkerClass, window: Window) -> f64 {
    replay(events, window).busy_fraction(class)
}

pub fn sustained_throughput(
    events: &[LogEvent],
    stage: StageKind,
    window: Window,
) -> Result<f64, MetricsError> {
    replay(events, window).sustained_throughput(stage)
}

pub fn handoff_latencies(events: &[LogEvent]) -> BTreeMap<HandoffKind, LatencySummary> {
    replay(events, (0.0, f64::MAX)).handoff_latencies()
}

pub fn strict_fraction(events: &[LogEvent]) -> Option<f64> {
    replay(events, (0.0, f64::MAX)).strict_fraction()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::SimTime;

    fn slot(class: WorkerClass, node: u32, lane: u8) -> SlotId {
        SlotId { class, node, lane }
    }

    fn ev(t: f64, kind: EventKind) -> LogEvent {
        LogEvent::at(SimTime::from_secs_f64(t), kind)
    }

    #[test]
    fn busy_fraction_integrates_census_and_clips_open_intervals() {
        let v = WorkerClass::Validator;
        let s0 = slot(v, 0, 0);
        let s1 = slot(v, 0, 1);
        let events = vec![
            ev(0.0, EventKind::PartitionChanged).class(v).entities(vec![2]),
            ev(0.0, EventKind::TaskStarted).stage(StageKind::ValidateStructure).task(1).slot(s0),
            ev(50.0, EventKind::TaskCompleted)
                .stage(StageKind::ValidateStructure)
                .task(1)
                .slot(s0)
                .outcome(TaskOutcome::Success),
            ev(25.0, EventKind::TaskStarted).stage(StageKind::ValidateStructure).task(2).slot(s1),
        ];
        // window [0,100]: slot0 busy 50s, slot1 busy 75s (open), offered 200
        let got = busy_fraction(&events, v, (0.0, 100.0));
        assert!((got - 125.0 / 200.0).abs() < 1e-12, "got {got}");
        // nothing offered for generators
        assert_eq!(busy_fraction(&events, WorkerClass::Generator, (0.0, 100.0)), 0.0);
    }

    #[test]
    fn census_changes_shift_the_denominator() {
        let v = WorkerClass::Validator;
        let events = vec![
            ev(0.0, EventKind::PartitionChanged).class(v).entities(vec![2]),
            ev(50.0, EventKind::PartitionChanged).class(v).entities(vec![4]),
        ];
        let sink = replay(&events, (0.0, 100.0));
        assert!((sink.offered(v) - (2.0 * 50.0 + 4.0 * 50.0)).abs() < 1e-9);
    }

    #[test]
    fn throughput_slope_matches_a_linear_ramp() {
        let g = StageKind::GenerateLinkers;
        let mut events = Vec::new();
        for i in 1..=20 {
            events.push(
                ev(i as f64 * 10.0, EventKind::TaskCompleted)
                    .stage(g)
                    .task(i)
                    .slot(slot(WorkerClass::Generator, 0, 0))
                    .outcome(TaskOutcome::Success),
            );
        }
        // one completion every 10s -> 360 per hour
        let rate = sustained_throughput(&events, g, (0.0, 300.0)).unwrap();
        assert!((rate - 360.0).abs() < 1e-6, "rate {rate}");
        // a single point is not a trend
        let err = sustained_throughput(&events[..1], g, (0.0, 300.0));
        assert!(err.is_err());
    }

    #[test]
    fn handoff_pairing_covers_all_five_kinds() {
        let est = StageKind::EstimateAdsorption;
        let s = slot(WorkerClass::Scavenger, 5, 0);
        let events = vec![
            // generation batch -> processed payload
            ev(10.0, EventKind::TaskCompleted)
                .stage(StageKind::GenerateLinkers)
                .task(1)
                .slot(slot(WorkerClass::Generator, 0, 0))
                .outcome(TaskOutcome::Success),
            ev(17.88, EventKind::PayloadReady)
                .stage(StageKind::ProcessLinkers)
                .task(2)
                .entities(vec![1]),
            // retrain -> first use
            ev(100.0, EventKind::RetrainFinished)
                .stage(StageKind::Retrain)
                .task(3)
                .entities(vec![2, 500]),
            ev(104.0, EventKind::ModelFirstUsed)
                .stage(StageKind::GenerateLinkers)
                .entities(vec![2]),
            // optimize -> charges -> chained uptake
            ev(200.0, EventKind::TaskCompleted)
                .stage(StageKind::OptimizeCells)
                .task(4)
                .entities(vec![7])
                .slot(slot(WorkerClass::Optimizer, 9, 0))
                .outcome(TaskOutcome::Success),
            ev(200.5, EventKind::TaskStarted).stage(est).task(5).entities(vec![7]).slot(s),
            ev(412.0, EventKind::TaskCompleted)
                .stage(est)
                .task(5)
                .entities(vec![7])
                .slot(s)
                .outcome(TaskOutcome::Success),
            ev(412.001, EventKind::TaskStarted).stage(est).task(6).entities(vec![7]).slot(s),
            // validation verdict payload
            ev(300.0, EventKind::TaskCompleted)
                .stage(StageKind::ValidateStructure)
                .task(8)
                .entities(vec![9])
                .slot(slot(WorkerClass::Validator, 1, 0))
                .outcome(TaskOutcome::Success)
                .value(0.08),
            ev(300.1015, EventKind::PayloadReady)
                .stage(StageKind::ValidateStructure)
                .task(8)
                .entities(vec![9]),
        ];
        let lat = handoff_latencies(&events);
        assert_eq!(lat.len(), 5);
        assert!((lat[&HandoffKind::ProcessedLinkers].mean - 7.88).abs() < 1e-9);
        assert!((lat[&HandoffKind::ModelAdoption].mean - 4.0).abs() < 1e-9);
        assert!((lat[&HandoffKind::ChargesStart].mean - 0.5).abs() < 1e-9);
        assert!((lat[&HandoffKind::AdsorptionChain].mean - 0.001).abs() < 1e-9);
        assert!((lat[&HandoffKind::ValidatePayload].mean - 0.1015).abs() < 1e-9);
    }

    #[test]
    fn failed_charges_produce_no_chain_sample() {
        let est = StageKind::EstimateAdsorption;
        let s = slot(WorkerClass::Scavenger, 5, 0);
        let events = vec![
            ev(1.0, EventKind::TaskStarted).stage(est).task(1).entities(vec![7]).slot(s),
            ev(2.0, EventKind::TaskCompleted)
                .stage(est)
                .task(1)
                .entities(vec![7])
                .slot(s)
                .outcome(TaskOutcome::Failed),
        ];
        assert!(handoff_latencies(&events).get(&HandoffKind::AdsorptionChain).is_none());
    }

    #[test]
    fn strict_fraction_counts_only_stability_verdicts() {
        let v = StageKind::ValidateStructure;
        let vs = slot(WorkerClass::Validator, 1, 0);
        let events = vec![
            // screened out before stability: no value, not counted
            ev(1.0, EventKind::TaskCompleted).stage(v).task(1).slot(vs).outcome(TaskOutcome::ScreenedOut),
            ev(2.0, EventKind::TaskCompleted).stage(v).task(2).slot(vs).outcome(TaskOutcome::Success).value(0.05),
            ev(3.0, EventKind::TaskCompleted).stage(v).task(3).slot(vs).outcome(TaskOutcome::Success).value(0.15),
            ev(4.0, EventKind::TaskCompleted).stage(v).task(4).slot(vs).outcome(TaskOutcome::ScreenedOut).value(0.30),
        ];
        let sink = replay(&events, (0.0, 10.0));
        assert_eq!(sink.stability_evaluated(), 3);
        assert_eq!(sink.strict_hits(), 1);
        assert!((sink.strict_fraction().unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(sink.discovery_curve(), vec![(2.0, 1)]);
        assert_eq!(sink.strict_hits_in((0.0, 1.5)), 0);
    }

    #[test]
    fn percentiles_use_nearest_rank() {
        let samples = vec![5.0, 1.0, 4.0, 2.0, 3.0];
        let s = summarize(&samples).unwrap();
        assert_eq!(s.count, 5);
        assert!((s.mean - 3.0).abs() < 1e-12);
        assert_eq!((s.p25, s.p50, s.p75), (2.0, 3.0, 4.0));
        assert!(summarize(&[]).is_none());
    }
}
