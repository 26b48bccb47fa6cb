//! Run configuration: TOML schema, defaults, validation, and resolution
//! of the node partition.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{ClusterError, Partition};
use crate::domain::NodeSpec;
use crate::quality::QualityModel;
use crate::stages::StageProfile;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported schema_version {0}, expected {SCHEMA_VERSION}")]
    UnsupportedSchema(u32),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

/// Node pools: either a bare `total_nodes` (split automatically) or all
/// four pool sizes stated explicitly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub total_nodes: Option<u32>,
    pub generator_nodes: Option<u32>,
    pub validator_nodes: Option<u32>,
    pub trainer_nodes: Option<u32>,
    pub optimizer_units: Option<u32>,
    pub scavengers_per_validator_node: u32,
    pub node: NodeSpec,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            total_nodes: Some(32),
            generator_nodes: None,
            validator_nodes: None,
            trainer_nodes: None,
            optimizer_units: None,
            scavengers_per_validator_node: 1,
            node: NodeSpec::default(),
        }
    }
}

impl PartitionConfig {
    pub fn with_total(total: u32) -> Self {
        PartitionConfig {
            total_nodes: Some(total),
            ..Default::default()
        }
    }

    pub fn resolve(&self) -> Result<Partition, ConfigError> {
        let pools = [
            self.generator_nodes,
            self.validator_nodes,
            self.trainer_nodes,
            self.optimizer_units,
        ];
        if pools.iter().any(Option::is_some) {
            if pools.iter().any(Option::is_none) {
                return Err(ConfigError::Invalid(
                    "explicit partitions must state generator_nodes, validator_nodes, \
                     trainer_nodes and optimizer_units together"
                        .into(),
                ));
            }
            let p = Partition {
                node_spec: self.node,
                generator_nodes: self.generator_nodes.unwrap(),
                validator_nodes: self.validator_nodes.unwrap(),
                trainer_nodes: self.trainer_nodes.unwrap(),
                optimizer_units: self.optimizer_units.unwrap(),
                scavengers_per_validator_node: self.scavengers_per_validator_node,
            };
            p.validate()?;
            if let Some(total) = self.total_nodes {
                if total != p.total_nodes() {
                    return Err(ConfigError::Invalid(format!(
                        "total_nodes = {total} disagrees with explicit pools summing to {}",
                        p.total_nodes()
                    )));
                }
            }
            Ok(p)
        } else {
            let total = self.total_nodes.ok_or_else(|| {
                ConfigError::Invalid("either total_nodes or explicit pools are required".into())
            })?;
            Ok(Partition::balanced(
                total,
                self.node,
                self.scavengers_per_validator_node,
            )?)
        }
    }
}

/// How assembly work is admitted onto scavenger cores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssemblyDiscipline {
    /// Any idle scavenger with no queued odd job assembles when parts exist.
    WorkConserving,
    /// Only a fixed budget of scavengers (one per 256 validator slots,
    /// rounded up) may assemble.
    Budgeted,
}

/// Policy knobs of the steering engine.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteeringConfig {
    pub assembly: AssemblyDiscipline,
    pub retraining_enabled: bool,
    /// Per-anchor cap on retained processed linkers; oldest fall out first.
    pub linker_pool_bound: usize,
    /// Frameworks under the training strain threshold required before the
    /// first retraining may start.
    pub retrain_pool_min: u64,
    /// Completed uptake estimates after which training examples are chosen
    /// by measured uptake instead of low strain.
    pub phase_switch_adsorptions: u64,
    pub reallocation: ReallocConfig,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        SteeringConfig {
            assembly: AssemblyDiscipline::WorkConserving,
            retraining_enabled: true,
            linker_pool_bound: 512,
            retrain_pool_min: 64,
            phase_switch_adsorptions: 64,
            reallocation: ReallocConfig::default(),
        }
    }
}

/// Hysteresis rule that trades generator nodes for validator capacity when
/// the assembled backlog stays deep, and back on starvation. Off by default:
/// elastic assembly keeps the backlog intentionally deep, which would make
/// this rule flap.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReallocConfig {
    pub enabled: bool,
    /// Backlog trigger as a multiple of total validator slots.
    pub stack_depth_factor: f64,
    /// How long the trigger must hold before a move, in seconds.
    pub sustain_s: f64,
    pub min_generator_nodes: u32,
}

impl Default for ReallocConfig {
    fn default() -> Self {
        ReallocConfig {
            enabled: false,
            stack_depth_factor: 4.0,
            sustain_s: 120.0,
            min_generator_nodes: 1,
        }
    }
}

/// Knobs of the thread-backed local runtime.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalConfig {
    /// Wall seconds per virtual second.
    pub time_scale: f64,
    /// Max worker threads per host core before the runtime refuses to start.
    pub oversubscription_cap: u32,
}

impl Default for LocalConfig {
    fn default() -> Self {
        LocalConfig {
            time_scale: 1e-3,
            oversubscription_cap: 64,
        }
    }
}

/// Everything a run needs, loadable from TOML.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub horizon_s: f64,
    pub partition: PartitionConfig,
    pub stages: StageProfile,
    pub quality: QualityModel,
    pub steering: SteeringConfig,
    pub local: LocalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            horizon_s: 3600.0,
            partition: PartitionConfig::default(),
            stages: StageProfile::default(),
            quality: QualityModel::default(),
            steering: SteeringConfig::default(),
            local: LocalConfig::default(),
        }
    }
}

fn check_probability(name: &str, p: f64) -> Result<(), ConfigError> {
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(ConfigError::Invalid(format!(
            "{name} must be a probability in [0, 1], got {p}"
        )));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(raw: &str) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = toml::from_str(raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<RunConfig, ConfigError> {
        RunConfig::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks bounds and resolves the partition, returning it.
    pub fn validate(&self) -> Result<Partition, ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::UnsupportedSchema(self.schema_version));
        }
        if !(self.horizon_s > 0.0) || !self.horizon_s.is_finite() {
            return Err(ConfigError::Invalid("horizon_s must be positive".into()));
        }
        let s = &self.stages;
        check_probability("stages.process_pass", s.process_pass)?;
        check_probability("stages.assembly_pass", s.assembly_pass)?;
        check_probability("stages.presim_pass", s.presim_pass)?;
        check_probability("stages.optimize_success", s.optimize_success)?;
        check_probability("stages.charge_failure", s.charge_failure)?;
        check_probability("stages.adsorption_success", s.adsorption_success)?;
        if s.duration_jitter < 0.0 || s.linkers_per_batch == 0 {
            return Err(ConfigError::Invalid(
                "stages.duration_jitter must be >= 0 and linkers_per_batch > 0".into(),
            ));
        }
        if s.retrain_min_examples == 0 || s.retrain_max_examples <= s.retrain_min_examples {
            return Err(ConfigError::Invalid(
                "retrain example bounds must satisfy 0 < min < max".into(),
            ));
        }
        let q = &self.quality;
        for (name, p) in [
            ("quality.anchors.strict_pass_untrained", q.anchors.strict_pass_untrained),
            ("quality.anchors.strict_pass_trained", q.anchors.strict_pass_trained),
            ("quality.anchors.training_pass_mid", q.anchors.training_pass_mid),
        ] {
            check_probability(name, p)?;
            if p == 0.0 || p == 1.0 {
                return Err(ConfigError::Invalid(format!("{name} must be strictly inside (0, 1)")));
            }
        }
        if q.anchors.strict_pass_trained <= q.anchors.strict_pass_untrained {
            return Err(ConfigError::Invalid(
                "training must raise the strict pass rate".into(),
            ));
        }
        if q.learning_rate < 0.0
            || q.fitness_concentration <= 0.0
            || q.capacity_base <= 0.0
            || q.capacity_sigma < 0.0
        {
            return Err(ConfigError::Invalid("quality parameters out of range".into()));
        }
        let st = &self.steering;
        if st.linker_pool_bound < crate::domain::LINKERS_PER_ANCHOR {
            return Err(ConfigError::Invalid(
                "steering.linker_pool_bound must hold at least one assembly draw".into(),
            ));
        }
        if st.retrain_pool_min == 0 {
            return Err(ConfigError::Invalid(
                "steering.retrain_pool_min must be positive".into(),
            ));
        }
        if self.local.time_scale <= 0.0 || self.local.oversubscription_cap == 0 {
            return Err(ConfigError::Invalid(
                "local.time_scale must be positive and oversubscription_cap nonzero".into(),
            ));
        }
        self.partition.resolve()
    }
}
