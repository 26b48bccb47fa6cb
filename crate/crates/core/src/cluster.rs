//! Node partition and worker-slot layout.
//!
//! A campaign splits its nodes into single-purpose pools. Slot ids are
//! assigned deterministically (generators first, then validators, the
//! trainer, and two-node optimizer units last) so logs from identical
//! configurations are identical.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{NodeSpec, ResourceSpec, SlotId, WorkerClass};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("{total} nodes cannot host the balanced layout; provide explicit pool sizes")]
    TooSmall { total: u32 },
    #[error("node spec supports at most {max} scavengers per validator node, got {got}")]
    ScavengerOverflow { max: u32, got: u32 },
    #[error("invalid partition: {0}")]
    Invalid(String),
}

/// Resolved node pools. Optimizer capacity is counted in two-node units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub node_spec: NodeSpec,
    pub generator_nodes: u32,
    pub validator_nodes: u32,
    pub trainer_nodes: u32,
    pub optimizer_units: u32,
    /// Spare cores staffed per validator node for odd jobs.
    pub scavengers_per_validator_node: u32,
}

impl Partition {
    /// Splits `total` nodes with one generator node per 32, one optimizer
    /// unit per 16, a single trainer node, and every remaining node on
    /// validation. Needs at least five nodes; smaller clusters must state
    /// pools explicitly.
    pub fn balanced(
        total: u32,
        node_spec: NodeSpec,
        scavengers_per_validator_node: u32,
    ) -> Result<Partition, ClusterError> {
        let generator_nodes = ((total as f64 / 32.0).round() as u32).max(1);
        let optimizer_units = ((total as f64 / 16.0).round() as u32).max(1);
        let trainer_nodes = 1;
        let fixed = generator_nodes + trainer_nodes + 2 * optimizer_units;
        if fixed >= total {
            return Err(ClusterError::TooSmall { total });
        }
        let p = Partition {
            node_spec,
            generator_nodes,
            validator_nodes: total - fixed,
            trainer_nodes,
            optimizer_units,
            scavengers_per_validator_node,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        let max_scav = self.max_scavengers_per_validator_node();
        if self.scavengers_per_validator_node > max_scav {
            return Err(ClusterError::ScavengerOverflow {
                max: max_scav,
                got: self.scavengers_per_validator_node,
            });
        }
        if self.validator_nodes > 0 && self.scavengers_per_validator_node == 0 {
            return Err(ClusterError::Invalid(
                "validator nodes need at least one scavenger core for assembly work".into(),
            ));
        }
        if self.total_nodes() == 0 {
            return Err(ClusterError::Invalid("empty partition".into()));
        }
        Ok(())
    }

    pub fn total_nodes(&self) -> u32 {
        self.generator_nodes + self.validator_nodes + self.trainer_nodes + 2 * self.optimizer_units
    }

    pub fn generator_lanes_per_node(&self) -> u32 {
        self.node_spec.gpus
    }

    pub fn validator_lanes_per_node(&self) -> u32 {
        self.node_spec.gpus * 2
    }

    pub fn max_scavengers_per_validator_node(&self) -> u32 {
        self.node_spec
            .cpu_cores
            .saturating_sub(self.validator_lanes_per_node())
    }

    fn node_base(&self, class: WorkerClass) -> u32 {
        match class {
            WorkerClass::Generator => 0,
            WorkerClass::Validator | WorkerClass::Scavenger => self.generator_nodes,
            WorkerClass::Trainer => self.generator_nodes + self.validator_nodes,
            WorkerClass::Optimizer => {
                self.generator_nodes + self.validator_nodes + self.trainer_nodes
            }
        }
    }

    pub fn slot_count(&self, class: WorkerClass) -> u32 {
        match class {
            WorkerClass::Generator => self.generator_nodes * self.generator_lanes_per_node(),
            WorkerClass::Validator => self.validator_nodes * self.validator_lanes_per_node(),
            WorkerClass::Scavenger => self.validator_nodes * self.scavengers_per_validator_node,
            WorkerClass::Trainer => self.trainer_nodes,
            WorkerClass::Optimizer => self.optimizer_units,
        }
    }

    pub fn slots(&self, class: WorkerClass) -> Vec<SlotId> {
        let base = self.node_base(class);
        let (node_count, lanes, node_stride) = match class {
            WorkerClass::Generator => (self.generator_nodes, self.generator_lanes_per_node(), 1),
            WorkerClass::Validator => (self.validator_nodes, self.validator_lanes_per_node(), 1),
            WorkerClass::Scavenger => (
                self.validator_nodes,
                self.scavengers_per_validator_node,
                1,
            ),
            WorkerClass::Trainer => (self.trainer_nodes, 1, 1),
            WorkerClass::Optimizer => (self.optimizer_units, 1, 2),
        };
        let mut out = Vec::with_capacity((node_count * lanes) as usize);
        for i in 0..node_count {
            for lane in 0..lanes {
                out.push(SlotId {
                    class,
                    node: base + i * node_stride,
                    lane: lane as u8,
                });
            }
        }
        out
    }

    pub fn census(&self) -> BTreeMap<WorkerClass, u32> {
        WorkerClass::ALL
            .into_iter()
            .map(|c| (c, self.slot_count(c)))
            .collect()
    }

    /// What one slot of a class occupies on its node(s).
    pub fn slot_resources(class: WorkerClass) -> ResourceSpec {
        match class {
            WorkerClass::Generator => ResourceSpec::gpu(1.0),
            WorkerClass::Validator => ResourceSpec::gpu_with_core(0.5, 1),
            WorkerClass::Scavenger => ResourceSpec::cores(1),
            WorkerClass::Trainer => ResourceSpec::nodes(1),
            WorkerClass::Optimizer => ResourceSpec::nodes(2),
        }
    }
}
