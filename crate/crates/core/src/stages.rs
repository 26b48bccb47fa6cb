//! Calibrated stage behavior shared by both backends: mean durations,
//! pass rates, payload sizes, and data-fabric transfer cost.

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::domain::StageKind;

/// Engine reaction latency for a control-only decision, in seconds.
pub const CONTROL_LATENCY_S: f64 = 0.001;
/// Extra latency when a decision must first parse a result payload.
pub const PAYLOAD_LATENCY_S: f64 = 0.1;

/// Wire cost of moving `bytes` through the shared data fabric.
pub fn transfer_time_s(bytes: u64) -> f64 {
    0.001 + bytes as f64 / 1e9
}

/// Per-stage timing and screening calibration. Durations are means in
/// seconds; multiplicative jitter is applied by `sample_duration`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageProfile {
    /// Linkers emitted by one generation task.
    pub linkers_per_batch: u32,
    pub generate_per_linker_s: f64,
    pub process_per_linker_s: f64,
    /// Probability a generated linker survives post-processing filters.
    pub process_pass: f64,
    pub assemble_s: f64,
    pub assembly_check_s: f64,
    /// Probability an assembled framework passes the connectivity check.
    pub assembly_pass: f64,
    pub presim_s: f64,
    /// Probability a framework survives the cheap pre-simulation screen.
    pub presim_pass: f64,
    pub stability_s: f64,
    pub optimize_s: f64,
    pub optimize_success: f64,
    pub charges_s: f64,
    pub charge_failure: f64,
    pub adsorption_s: f64,
    pub adsorption_success: f64,
    pub retrain_base_s: f64,
    pub retrain_span_s: f64,
    pub retrain_min_examples: u64,
    pub retrain_max_examples: u64,
    /// Log-scale sigma of the multiplicative duration noise; 0 disables it.
    pub duration_jitter: f64,
}

impl Default for StageProfile {
    fn default() -> Self {
        StageProfile {
            linkers_per_batch: 64,
            generate_per_linker_s: 0.37,
            process_per_linker_s: 0.12,
            process_pass: 0.228,
            assemble_s: 0.46,
            assembly_check_s: 2.56,
            assembly_pass: 0.999,
            presim_s: 19.98,
            presim_pass: 15.20 / 99.90,
            stability_s: 204.52,
            optimize_s: 1517.53,
            optimize_success: 0.98,
            charges_s: 211.78,
            charge_failure: 0.02,
            adsorption_s: 1892.89,
            adsorption_success: 0.98,
            retrain_base_s: 30.0,
            retrain_span_s: 270.0,
            retrain_min_examples: 32,
            retrain_max_examples: 8192,
            duration_jitter: 0.1,
        }
    }
}

impl StageProfile {
    pub fn generate_batch_mean_s(&self) -> f64 {
        self.linkers_per_batch as f64 * self.generate_per_linker_s
    }

    pub fn process_batch_mean_s(&self, linkers: usize) -> f64 {
        linkers as f64 * self.process_per_linker_s
    }

    pub fn assemble_mean_s(&self) -> f64 {
        self.assemble_s + self.assembly_check_s
    }

    /// Clamps the example count and interpolates the retraining wall time.
    /// Retraining time is deterministic: no jitter is applied.
    pub fn retrain_duration_s(&self, examples: u64) -> f64 {
        let n = examples.clamp(self.retrain_min_examples, self.retrain_max_examples);
        let span = (self.retrain_max_examples - self.retrain_min_examples) as f64;
        self.retrain_base_s
            + self.retrain_span_s * (n - self.retrain_min_examples) as f64 / span
    }

    pub fn clamp_examples(&self, examples: u64) -> u64 {
        examples.clamp(self.retrain_min_examples, self.retrain_max_examples)
    }

    /// Draws a duration with the profile's multiplicative noise while
    /// preserving the requested mean; zero jitter returns the mean exactly.
    pub fn sample_duration<R: Rng + ?Sized>(&self, mean_s: f64, rng: &mut R) -> f64 {
        sample_lognormal_mean(mean_s, self.duration_jitter, rng)
    }
}

/// Mean-preserving lognormal draw: log-scale sigma, mu shifted so the
/// expectation equals `mean`.
pub fn sample_lognormal_mean<R: Rng + ?Sized>(mean: f64, sigma: f64, rng: &mut R) -> f64 {
    if sigma <= 0.0 || mean <= 0.0 {
        return mean;
    }
    let mu = mean.ln() - sigma * sigma / 2.0;
    LogNormal::new(mu, sigma).expect("valid lognormal").sample(rng)
}

/// Draws the size of the payload a task reads at start.
pub fn input_bytes<R: Rng + ?Sized>(stage: StageKind, rng: &mut R) -> u64 {
    match stage {
        StageKind::ProcessLinkers => rng.gen_range(100_000..=500_000),
        StageKind::AssembleMofs => rng.gen_range(10_000_000..=40_000_000),
        _ => 100_000,
    }
}

/// Draws the size of the payload a task writes at completion.
pub fn output_bytes<R: Rng + ?Sized>(stage: StageKind, rng: &mut R) -> u64 {
    match stage {
        StageKind::ProcessLinkers => rng.gen_range(100_000..=500_000),
        StageKind::AssembleMofs => rng.gen_range(1_000_000..=2_000_000),
        StageKind::ValidateStructure => rng.gen_range(400_000..=600_000),
        _ => 100_000,
    }
}
