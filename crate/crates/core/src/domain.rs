//! Campaign vocabulary: stages, records, resources, tasks and time.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Strain below this marks a framework as a confirmed hit.
pub const STRICT_STRAIN_THRESHOLD: f64 = 0.10;
/// Strain below this admits a framework into the retraining pool.
pub const TRAINING_STRAIN_THRESHOLD: f64 = 0.25;
/// Linkers drawn per anchor type for one assembly.
pub const LINKERS_PER_ANCHOR: usize = 4;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("stage transition {from:?} -> {to:?} is not monotone")]
    StageRegression { from: MofStage, to: MofStage },
    #[error("record is terminal ({0:?}) and cannot advance")]
    Terminal(MofStage),
    #[error("resource spec must request either whole nodes or a core/gpu share, not {0}")]
    InvalidResource(String),
}

/// Virtual time as integer microseconds. Integer ticks keep event ordering
/// exact and make serialized logs reproducible byte for byte.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_secs_f64(secs: f64) -> SimTime {
        SimTime((secs.max(0.0) * 1e6).round() as u64)
    }

    pub fn from_secs(secs: u64) -> SimTime {
        SimTime(secs * 1_000_000)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn micros(self) -> u64 {
        self.0
    }

    #[must_use]
    pub fn plus(self, other: SimTime) -> SimTime {
        SimTime(self.0 + other.0)
    }

    #[must_use]
    pub fn plus_secs_f64(self, secs: f64) -> SimTime {
        self.plus(SimTime::from_secs_f64(secs))
    }

    #[must_use]
    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs_f64())
    }
}

macro_rules! id_newtype {
    ($name:ident) => {
        #[derive(
            Debug,
            Clone,
            Copy,
            PartialEq,
            Eq,
            PartialOrd,
            Ord,
            Hash,
            Serialize,
            Deserialize,
            Default,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_newtype!(LinkerId);
id_newtype!(MofId);
id_newtype!(TaskId);

/// Anchor chemistry of a generated linker. Assembly needs both kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKind {
    Bca,
    Bzn,
}

impl AnchorKind {
    pub const ALL: [AnchorKind; 2] = [AnchorKind::Bca, AnchorKind::Bzn];
}

/// The seven task kinds the campaign schedules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    GenerateLinkers,
    ProcessLinkers,
    AssembleMofs,
    ValidateStructure,
    OptimizeCells,
    EstimateAdsorption,
    Retrain,
}

impl StageKind {
    pub const ALL: [StageKind; 7] = [
        StageKind::GenerateLinkers,
        StageKind::ProcessLinkers,
        StageKind::AssembleMofs,
        StageKind::ValidateStructure,
        StageKind::OptimizeCells,
        StageKind::EstimateAdsorption,
        StageKind::Retrain,
    ];

    /// Pipeline rank, 1-based in execution order.
    pub fn order(self) -> u8 {
        match self {
            StageKind::GenerateLinkers => 1,
            StageKind::ProcessLinkers => 2,
            StageKind::AssembleMofs => 3,
            StageKind::ValidateStructure => 4,
            StageKind::OptimizeCells => 5,
            StageKind::EstimateAdsorption => 6,
            StageKind::Retrain => 7,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StageKind::GenerateLinkers => "generate_linkers",
            StageKind::ProcessLinkers => "process_linkers",
            StageKind::AssembleMofs => "assemble_mofs",
            StageKind::ValidateStructure => "validate_structure",
            StageKind::OptimizeCells => "optimize_cells",
            StageKind::EstimateAdsorption => "estimate_adsorption",
            StageKind::Retrain => "retrain",
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Lifecycle of one assembled framework. `Discarded` is terminal; everything
/// else advances strictly forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MofStage {
    Assembled,
    AssemblyChecked,
    PreSimChecked,
    StabilityKnown,
    CellOptimized,
    ChargesKnown,
    CapacityKnown,
    Discarded,
}

impl MofStage {
    fn rank(self) -> u8 {
        match self {
            MofStage::Assembled => 0,
            MofStage::AssemblyChecked => 1,
            MofStage::PreSimChecked => 2,
            MofStage::StabilityKnown => 3,
            MofStage::CellOptimized => 4,
            MofStage::ChargesKnown => 5,
            MofStage::CapacityKnown => 6,
            MofStage::Discarded => 7,
        }
    }

    pub fn is_terminal(self) -> bool {
        self == MofStage::Discarded
    }
}

/// One generated linker that survived post-processing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkerRecord {
    pub id: LinkerId,
    pub anchor: AnchorKind,
    pub created_at: SimTime,
    /// Hidden fitness in [0, 1]; drives downstream strain draws.
    pub latent_quality: f64,
    /// Generator version that produced the linker.
    pub model_version: u32,
}

/// One assembled framework and everything learned about it so far.
///
/// Fields are append-only: a value, once set, is never rewritten, and the
/// stage advances monotonically with `Discarded` as the only terminal state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MofRecord {
    pub id: MofId,
    pub linker_ids: Vec<LinkerId>,
    pub stage: MofStage,
    pub cell_initial: Matrix3<f64>,
    pub cell_final: Option<Matrix3<f64>>,
    pub strain: Option<f64>,
    pub capacity: Option<f64>,
    pub stage_times: BTreeMap<MofStage, SimTime>,
}

impl MofRecord {
    pub fn new(id: MofId, linker_ids: Vec<LinkerId>, cell_initial: Matrix3<f64>, at: SimTime) -> Self {
        let mut stage_times = BTreeMap::new();
        stage_times.insert(MofStage::Assembled, at);
        MofRecord {
            id,
            linker_ids,
            stage: MofStage::Assembled,
            cell_initial,
            cell_final: None,
            strain: None,
            capacity: None,
            stage_times,
        }
    }

    /// Advances the lifecycle. Skipping intermediate stages is allowed only
    /// into `Discarded`; any backward move is an error.
    pub fn advance(&mut self, to: MofStage, at: SimTime) -> Result<(), DomainError> {
        if self.stage.is_terminal() {
            return Err(DomainError::Terminal(self.stage));
        }
        if to.rank() <= self.stage.rank() {
            return Err(DomainError::StageRegression {
                from: self.stage,
                to,
            });
        }
        self.stage = to;
        self.stage_times.insert(to, at);
        Ok(())
    }
}

/// Generator checkpoint owned by the steering engine.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GeneratorState {
    pub version: u32,
    /// Model quality in [0, 1]; non-decreasing across retrains.
    pub quality: f64,
    pub examples_seen: u64,
    pub last_retrain_finished: Option<SimTime>,
}

impl Default for GeneratorState {
    fn default() -> Self {
        GeneratorState {
            version: 1,
            quality: 0.0,
            examples_seen: 0,
            last_retrain_finished: None,
        }
    }
}

/// Worker taxonomy. Slot counts per class come from the node partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerClass {
    /// One GPU; runs linker generation.
    Generator,
    /// Half a GPU plus one pinned core; runs structure validation.
    Validator,
    /// One otherwise idle core; runs post-processing odd jobs.
    Scavenger,
    /// One whole node; runs generator retraining.
    Trainer,
    /// Two whole nodes; runs cell optimization.
    Optimizer,
}

impl WorkerClass {
    pub const ALL: [WorkerClass; 5] = [
        WorkerClass::Generator,
        WorkerClass::Validator,
        WorkerClass::Scavenger,
        WorkerClass::Trainer,
        WorkerClass::Optimizer,
    ];

    pub fn code(self) -> char {
        match self {
            WorkerClass::Generator => 'G',
            WorkerClass::Validator => 'V',
            WorkerClass::Scavenger => 'S',
            WorkerClass::Trainer => 'T',
            WorkerClass::Optimizer => 'O',
        }
    }

    pub fn from_code(c: char) -> Option<WorkerClass> {
        WorkerClass::ALL.into_iter().find(|w| w.code() == c)
    }

    pub fn name(self) -> &'static str {
        match self {
            WorkerClass::Generator => "generator",
            WorkerClass::Validator => "validator",
            WorkerClass::Scavenger => "scavenger",
            WorkerClass::Trainer => "trainer",
            WorkerClass::Optimizer => "optimizer",
        }
    }
}

impl fmt::Display for WorkerClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Stable identity of one worker slot: class, anchor node, lane on that node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotId {
    pub class: WorkerClass,
    pub node: u32,
    pub lane: u8,
}

impl fmt::Display for SlotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:04}.{}", self.class.code(), self.node, self.lane)
    }
}

impl SlotId {
    pub fn parse(s: &str) -> Option<SlotId> {
        let mut chars = s.chars();
        let class = WorkerClass::from_code(chars.next()?)?;
        let rest: String = chars.collect();
        let (node, lane) = rest.split_once('.')?;
        Some(SlotId {
            class,
            node: node.parse().ok()?,
            lane: lane.parse().ok()?,
        })
    }
}

impl Serialize for SlotId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SlotId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        SlotId::parse(&raw).ok_or_else(|| serde::de::Error::custom("malformed slot id"))
    }
}

/// Hardware shape of one cluster node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub cpu_cores: u32,
    pub gpus: u32,
    pub gpu_memory_gb: u32,
}

impl Default for NodeSpec {
    fn default() -> Self {
        NodeSpec {
            cpu_cores: 32,
            gpus: 4,
            gpu_memory_gb: 40,
        }
    }
}

/// What a task asks the cluster for: either whole nodes or a fractional
/// share of one node, never both.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ResourceSpec {
    pub cpu_cores: u32,
    pub gpu_fraction: f64,
    pub whole_nodes: u32,
}

impl ResourceSpec {
    pub fn cores(n: u32) -> ResourceSpec {
        ResourceSpec {
            cpu_cores: n,
            ..Default::default()
        }
    }

    pub fn gpu(fraction: f64) -> ResourceSpec {
        ResourceSpec {
            gpu_fraction: fraction,
            ..Default::default()
        }
    }

    pub fn gpu_with_core(fraction: f64, cores: u32) -> ResourceSpec {
        ResourceSpec {
            cpu_cores: cores,
            gpu_fraction: fraction,
            ..Default::default()
        }
    }

    pub fn nodes(n: u32) -> ResourceSpec {
        ResourceSpec {
            whole_nodes: n,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let fractional = self.cpu_cores > 0 || self.gpu_fraction > 0.0;
        let whole = self.whole_nodes > 0;
        if fractional == whole {
            return Err(DomainError::InvalidResource(format!("{self:?}")));
        }
        if self.gpu_fraction < 0.0 || self.gpu_fraction > 4.0 {
            return Err(DomainError::InvalidResource(format!("{self:?}")));
        }
        Ok(())
    }
}

/// How a finished task turned out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOutcome {
    Success,
    /// Rejected by a screening policy; an expected, budgeted outcome.
    ScreenedOut,
    /// Runtime fault.
    Failed,
}

/// One unit of work submitted to a backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskRequest {
    pub id: TaskId,
    pub stage: StageKind,
    /// Entity ids the task operates on (linkers, frameworks, or a source
    /// task id for lineage, depending on stage).
    pub payload_ids: Vec<u64>,
    pub resource: ResourceSpec,
    pub input_bytes: u64,
    pub submitted_at: SimTime,
}

/// Completion notification delivered back to the engine.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskResult {
    pub request_id: TaskId,
    pub slot: SlotId,
    pub started_at: SimTime,
    pub completed_at: SimTime,
    pub output_bytes: u64,
    pub outcome: TaskOutcome,
    /// Stage-dependent scalar: strain for validation, capacity for
    /// adsorption, post-retrain quality for retraining.
    pub value: Option<f64>,
}
