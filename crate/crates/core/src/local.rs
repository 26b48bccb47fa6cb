//! Miniature wall-clock backend. Every slot becomes a real OS thread whose
//! task durations are scaled sleeps; the engine makes exactly the same
//! decisions it makes under simulation, so the two logs can be compared
//! checkpoint by checkpoint.
//!
//! Virtual time is wall time divided by `local.time_scale`. Stamps are
//! clamped monotone: scheduling jitter can reorder nearby completions, and
//! the log must still read forward.
//!
//! Workers sleep to an absolute deadline on the shared clock rather than for
//! a relative duration, so channel latency and sleep overshoot do not
//! accumulate along a lane over thousands of consecutive tasks. Each worker
//! reports the instant its own task finished; queueing between the worker
//! and this loop delays processing but never inflates the logged stamps.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::domain::{SimTime, SlotId, TaskId};
use crate::steering::{Engine, PreparedTask, RunStats};
use crate::telemetry::EventSink;

#[derive(Debug, Error)]
pub enum LocalError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(
        "partition needs {threads} worker threads; host allows {allowed} \
         ({cores} cores x cap {cap})"
    )]
    Oversubscribed {
        threads: usize,
        allowed: usize,
        cores: usize,
        cap: u32,
    },
    #[error("{0}")]
    Unsupported(String),
}

enum WorkMsg {
    Run { task: TaskId, deadline: Instant },
    Stop,
}

const STEP_DECISION: u8 = 0;
const STEP_PAYLOAD: u8 = 1;

/// Deferred engine callback: (virtual micros, tiebreak, step, raw task id).
type Echo = Reverse<(u64, u64, u8, u64)>;

fn send_work(
    lanes: &HashMap<SlotId, mpsc::Sender<WorkMsg>>,
    p: &PreparedTask,
    epoch: Instant,
    scale: f64,
    started_at_s: f64,
    in_flight: &mut usize,
) {
    debug_assert!(lanes.contains_key(&p.slot), "no thread for {}", p.slot);
    let due_s = (started_at_s + p.duration.as_secs_f64()) * scale;
    let deadline = epoch + Duration::from_secs_f64(due_s);
    if let Some(tx) = lanes.get(&p.slot) {
        if tx.send(WorkMsg::Run { task: p.task_id, deadline }).is_ok() {
            *in_flight += 1;
        }
    }
}

/// Fires every deferred engine callback nominally due by `cutoff`, in order.
#[allow(clippy::too_many_arguments)]
fn drain_echoes<S: EventSink>(
    engine: &mut Engine,
    echoes: &mut BinaryHeap<Echo>,
    cutoff: f64,
    floor: &mut f64,
    horizon: f64,
    lanes: &HashMap<SlotId, mpsc::Sender<WorkMsg>>,
    epoch: Instant,
    scale: f64,
    in_flight: &mut usize,
    sink: &mut S,
) {
    while let Some(&Reverse((at_us, _, step, raw))) = echoes.peek() {
        let nominal = at_us as f64 / 1e6;
        if nominal > cutoff {
            break;
        }
        echoes.pop();
        let stamp = SimTime::from_secs_f64(nominal.max(*floor));
        *floor = floor.max(stamp.as_secs_f64());
        if stamp.as_secs_f64() >= horizon {
            continue;
        }
        let prepared = match step {
            STEP_DECISION => engine.decide(TaskId(raw), stamp, sink),
            _ => engine.payload(TaskId(raw), stamp, sink),
        };
        for p in prepared {
            send_work(lanes, &p, epoch, scale, stamp.as_secs_f64(), in_flight);
        }
    }
}

/// Runs the campaign on live threads until the virtual horizon.
pub fn run_local<S: EventSink>(cfg: &RunConfig, sink: &mut S) -> Result<RunStats, LocalError> {
    if cfg.steering.reallocation.enabled {
        return Err(LocalError::Unsupported(
            "lane reallocation needs the simulated backend; live threads cannot be relabeled"
                .into(),
        ));
    }
    let mut engine = Engine::new(cfg)?;
    let all_slots: Vec<SlotId> = {
        let p = engine.partition();
        p.census().keys().flat_map(|&c| p.slots(c)).collect()
    };

    let threads = all_slots.len();
    let cores = thread::available_parallelism().map(usize::from).unwrap_or(1);
    let cap = cfg.local.oversubscription_cap;
    let allowed = cores.saturating_mul(cap as usize);
    if threads > allowed {
        return Err(LocalError::Oversubscribed { threads, allowed, cores, cap });
    }

    // tail of each sleep burned in a spin so timer slack cannot bias stamps
    const SPIN_WINDOW: Duration = Duration::from_micros(100);

    let start = Instant::now();
    let (done_tx, done_rx) = mpsc::channel::<(TaskId, f64)>();
    let mut lanes: HashMap<SlotId, mpsc::Sender<WorkMsg>> = HashMap::with_capacity(threads);
    let mut handles = Vec::with_capacity(threads);
    for &slot in &all_slots {
        let (tx, rx) = mpsc::channel::<WorkMsg>();
        let done = done_tx.clone();
        handles.push(thread::spawn(move || {
            while let Ok(WorkMsg::Run { task, deadline }) = rx.recv() {
                let wait = deadline.saturating_duration_since(Instant::now());
                if wait > SPIN_WINDOW {
                    thread::sleep(wait - SPIN_WINDOW);
                }
                while Instant::now() < deadline {
                    std::hint::spin_loop();
                }
                let finished = start.elapsed().as_secs_f64();
                if done.send((task, finished)).is_err() {
                    break;
                }
            }
        }));
        lanes.insert(slot, tx);
    }
    drop(done_tx);

    let scale = cfg.local.time_scale;
    let horizon = cfg.horizon_s;
    let virtual_now = |floor: f64| (start.elapsed().as_secs_f64() / scale).max(floor);

    let mut floor = 0.0_f64;
    let mut in_flight = 0_usize;
    let mut echoes: BinaryHeap<Echo> = BinaryHeap::new();
    let mut seq = 0_u64;

    for p in engine.bootstrap(SimTime::from_secs(0), sink) {
        send_work(&lanes, &p, start, scale, 0.0, &mut in_flight);
    }

    loop {
        let now_v = virtual_now(floor);
        if now_v >= horizon {
            break;
        }

        drain_echoes(
            &mut engine, &mut echoes, now_v, &mut floor, horizon, &lanes, start, scale,
            &mut in_flight, sink,
        );

        if in_flight == 0 && echoes.is_empty() {
            break;
        }

        let next_due = echoes
            .peek()
            .map_or(horizon, |&Reverse((us, ..))| us as f64 / 1e6)
            .min(horizon);
        let wait_wall =
            (next_due * scale - start.elapsed().as_secs_f64()).max(0.0) + 100e-6;
        match done_rx.recv_timeout(Duration::from_secs_f64(wait_wall)) {
            Ok((task, finished_wall_s)) => {
                in_flight -= 1;
                let stamp_s = (finished_wall_s / scale).max(floor);
                if stamp_s >= horizon {
                    break;
                }
                // callbacks nominally due before this completion fire first,
                // keeping the decision order the simulator would use
                drain_echoes(
                    &mut engine, &mut echoes, stamp_s, &mut floor, horizon, &lanes, start,
                    scale, &mut in_flight, sink,
                );
                let stamp = SimTime::from_secs_f64(stamp_s.max(floor));
                floor = floor.max(stamp.as_secs_f64());
                let timing = engine.complete(task, stamp, sink);
                seq += 1;
                echoes.push(Reverse((timing.decision_at.micros(), seq, STEP_DECISION, task.0)));
                seq += 1;
                echoes.push(Reverse((timing.payload_at.micros(), seq, STEP_PAYLOAD, task.0)));
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
        }
    }

    for tx in lanes.values() {
        let _ = tx.send(WorkMsg::Stop);
    }
    // unread completions just unblock the workers into their Stop
    drop(done_rx);
    for h in handles {
        let _ = h.join();
    }
    Ok(engine.finish())
}
