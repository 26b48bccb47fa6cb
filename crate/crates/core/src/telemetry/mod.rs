//! Structured event log: the single observable record of a run.
//!
//! Every downstream number (utilization, throughput, latency, discovery
//! rate) is a pure function of this log, so the two backends stay
//! comparable and runs can be analyzed offline from the JSONL file alone.

pub mod audit;
pub mod metrics;

pub use metrics::MetricsSink;

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{SimTime, SlotId, StageKind, TaskOutcome, WorkerClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    TaskSubmitted,
    TaskStarted,
    TaskCompleted,
    PayloadReady,
    QueuePush,
    QueuePop,
    RetrainStarted,
    RetrainFinished,
    ModelFirstUsed,
    PartitionChanged,
}

/// One log line. `time` is seconds with microsecond precision. Optional
/// fields are omitted from the serialized form when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub time: f64,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<StageKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<WorkerClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entity_ids: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot_id: Option<SlotId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<TaskOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

impl LogEvent {
    pub fn at(time: SimTime, kind: EventKind) -> LogEvent {
        LogEvent {
            time: time.as_secs_f64(),
            kind,
            stage: None,
            class: None,
            task_id: None,
            entity_ids: Vec::new(),
            slot_id: None,
            bytes: None,
            outcome: None,
            value: None,
        }
    }

    pub fn stage(mut self, stage: StageKind) -> Self {
        self.stage = Some(stage);
        self
    }

    pub fn class(mut self, class: WorkerClass) -> Self {
        self.class = Some(class);
        self
    }

    pub fn task(mut self, id: u64) -> Self {
        self.task_id = Some(id);
        self
    }

    pub fn entities(mut self, ids: Vec<u64>) -> Self {
        self.entity_ids = ids;
        self
    }

    pub fn slot(mut self, slot: SlotId) -> Self {
        self.slot_id = Some(slot);
        self
    }

    pub fn bytes(mut self, bytes: u64) -> Self {
        self.bytes = Some(bytes);
        self
    }

    pub fn outcome(mut self, outcome: TaskOutcome) -> Self {
        self.outcome = Some(outcome);
        self
    }

    pub fn value(mut self, value: f64) -> Self {
        self.value = Some(value);
        self
    }
}

/// Receives events as they happen. Implementations range from full
/// retention to online aggregation for runs too large to hold.
pub trait EventSink {
    fn record(&mut self, event: &LogEvent);
}

/// Retains every event in memory.
#[derive(Debug, Default)]
pub struct VecSink {
    pub events: Vec<LogEvent>,
}

impl EventSink for VecSink {
    fn record(&mut self, event: &LogEvent) {
        self.events.push(event.clone());
    }
}

/// Drops everything; useful when only the run summary matters.
#[derive(Debug, Default)]
pub struct NullSink;

impl EventSink for NullSink {
    fn record(&mut self, _event: &LogEvent) {}
}

/// Streams events as one JSON object per line.
pub struct JsonlSink<W: Write> {
    writer: W,
}

impl JsonlSink<BufWriter<File>> {
    pub fn create(path: &Path) -> io::Result<Self> {
        Ok(JsonlSink {
            writer: BufWriter::new(File::create(path)?),
        })
    }
}

impl<W: Write> JsonlSink<W> {
    pub fn new(writer: W) -> Self {
        JsonlSink { writer }
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.writer.flush()?;
        Ok(self.writer)
    }
}

impl<W: Write> EventSink for JsonlSink<W> {
    fn record(&mut self, event: &LogEvent) {
        serde_json::to_writer(&mut self.writer, event).expect("event serializes");
        self.writer.write_all(b"\n").expect("log write succeeds");
    }
}

/// Fans one event stream out to two sinks.
impl<A: EventSink, B: EventSink> EventSink for (A, B) {
    fn record(&mut self, event: &LogEvent) {
        self.0.record(event);
        self.1.record(event);
    }
}

/// Reads a JSONL event log back into memory.
pub fn read_jsonl(path: &Path) -> io::Result<Vec<LogEvent>> {
    let reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event: LogEvent = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        events.push(event);
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_event() -> LogEvent {
        LogEvent::at(SimTime::from_secs_f64(12.5), EventKind::TaskCompleted)
            .stage(StageKind::ValidateStructure)
            .task(42)
            .entities(vec![7])
            .slot(SlotId {
                class: WorkerClass::Validator,
                node: 3,
                lane: 1,
            })
            .bytes(512_000)
            .outcome(TaskOutcome::Success)
            .value(0.083)
    }

    #[test]
    fn events_round_trip_through_json() {
        let e = sample_event();
        let line = serde_json::to_string(&e).unwrap();
        assert!(line.contains("\"slot_id\":\"V0003.1\""));
        assert!(line.contains("\"kind\":\"task_completed\""));
        let back: LogEvent = serde_json::from_str(&line).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn absent_fields_are_omitted() {
        let e = LogEvent::at(SimTime::ZERO, EventKind::PartitionChanged)
            .class(WorkerClass::Generator)
            .entities(vec![4]);
        let line = serde_json::to_string(&e).unwrap();
        assert!(!line.contains("slot_id"));
        assert!(!line.contains("outcome"));
        assert!(!line.contains("task_id"));
        assert!(line.contains("\"class\":\"generator\""));
    }

    #[test]
    fn jsonl_sink_round_trips_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let mut sink = JsonlSink::create(&path).unwrap();
        let e = sample_event();
        sink.record(&e);
        sink.record(&LogEvent::at(SimTime::from_secs(13), EventKind::QueuePush));
        sink.finish().unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], e);
    }

    #[test]
    fn tee_sink_duplicates_the_stream() {
        let mut tee = (VecSink::default(), VecSink::default());
        tee.record(&sample_event());
        assert_eq!(tee.0.events.len(), 1);
        assert_eq!(tee.1.events, tee.0.events);
    }
}
