//! Discrete-event backend: runs a whole campaign on a virtual clock.
//!
//! The kernel is a single min-heap of pending moments. Each completed task
//! contributes three: the completion itself, the control-plane echo that
//! frees or rechains its slot, and the payload arrival that feeds queues
//! downstream. Ties resolve by insertion order, so a run is a pure function
//! of its configuration.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::config::{ConfigError, RunConfig};
use crate::domain::{SimTime, TaskId};
use crate::steering::{Engine, PreparedTask, RunStats};
use crate::telemetry::EventSink;

const STEP_FINISH: u8 = 0;
const STEP_DECISION: u8 = 1;
const STEP_PAYLOAD: u8 = 2;

/// Heap entry: (time in microseconds, insertion sequence, step, task id).
type Pending = Reverse<(u64, u64, u8, u64)>;

/// Runs one campaign to its horizon and returns the engine for inspection
/// alongside the run counters.
pub fn run_campaign<S: EventSink>(
    cfg: &RunConfig,
    sink: &mut S,
) -> Result<(RunStats, Engine), ConfigError> {
    let mut engine = Engine::new(cfg)?;
    let horizon = SimTime::from_secs_f64(cfg.horizon_s);
    let mut heap: BinaryHeap<Pending> = BinaryHeap::new();
    let mut seq: u64 = 0;

    let schedule = |heap: &mut BinaryHeap<Pending>, seq: &mut u64, at: SimTime, step: u8, task: TaskId| {
        *seq += 1;
        heap.push(Reverse((at.micros(), *seq, step, task.0)));
    };

    for p in engine.bootstrap(SimTime::ZERO, sink) {
        schedule(&mut heap, &mut seq, p.duration, STEP_FINISH, p.task_id);
    }

    while let Some(Reverse((at_us, _, step, raw_task))) = heap.pop() {
        let now = SimTime(at_us);
        if now > horizon {
            break;
        }
        let task = TaskId(raw_task);
        match step {
            STEP_FINISH => {
                let timing = engine.complete(task, now, sink);
                schedule(&mut heap, &mut seq, timing.decision_at, STEP_DECISION, task);
                schedule(&mut heap, &mut seq, timing.payload_at, STEP_PAYLOAD, task);
            }
            STEP_DECISION => {
                for p in engine.decide(task, now, sink) {
                    dispatch(&mut heap, &mut seq, now, p);
                }
            }
            _ => {
                for p in engine.payload(task, now, sink) {
                    dispatch(&mut heap, &mut seq, now, p);
                }
            }
        }
    }
    let stats = engine.finish();
    Ok((stats, engine))
}

fn dispatch(heap: &mut BinaryHeap<Pending>, seq: &mut u64, now: SimTime, p: PreparedTask) {
    *seq += 1;
    heap.push(Reverse((
        now.plus(p.duration).micros(),
        *seq,
        STEP_FINISH,
        p.task_id.0,
    )));
}

/// Runs one campaign and returns only the counters.
pub fn run_simulation<S: EventSink>(cfg: &RunConfig, sink: &mut S) -> Result<RunStats, ConfigError> {
    run_campaign(cfg, sink).map(|(stats, _)| stats)
}
