//! Stochastic ground truth for framework properties.
//!
//! Three coupled pieces: a latent per-linker fitness drawn around the
//! generator's current quality, a lognormal strain law whose median falls
//! as fitness rises, and a lognormal uptake law that rewards low strain.
//! The strain law's three free parameters are solved at startup from three
//! anchor pass rates rather than hardcoded, so recalibrating one anchor
//! moves the whole law consistently.

use rand::Rng;
use rand_distr::{Beta, Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::domain::{STRICT_STRAIN_THRESHOLD, TRAINING_STRAIN_THRESHOLD};

/// Pass-rate anchors the strain law is solved against.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrainAnchors {
    /// P(strain < strict threshold) for a fully untrained generator.
    pub strict_pass_untrained: f64,
    /// P(strain < strict threshold) for a fully trained generator.
    pub strict_pass_trained: f64,
    /// P(strain < training threshold) at mid fitness.
    pub training_pass_mid: f64,
}

impl Default for StrainAnchors {
    fn default() -> Self {
        StrainAnchors {
            strict_pass_untrained: 0.05,
            strict_pass_trained: 0.12,
            training_pass_mid: 8.60 / 15.20,
        }
    }
}

/// Solved strain-law parameters: `strain ~ LogNormal(ln(scale * (1 - gain * fitness)), sigma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrainLaw {
    pub sigma: f64,
    pub scale: f64,
    pub gain: f64,
}

/// Solves the strain law from the anchors.
///
/// Eliminating scale and gain reduces the system to one strictly increasing
/// function of sigma, which bisection pins down to machine precision.
pub fn solve_strain_law(anchors: &StrainAnchors) -> StrainLaw {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let z0 = normal.inverse_cdf(anchors.strict_pass_untrained);
    let z1 = normal.inverse_cdf(anchors.strict_pass_trained);
    let zm = normal.inverse_cdf(anchors.training_pass_mid);
    let d01 = z0 - z1;
    let d0m = z0 - zm;
    let ratio = (TRAINING_STRAIN_THRESHOLD / STRICT_STRAIN_THRESHOLD).ln();
    // root of g(sigma) = ln((1 + e^{sigma*d01}) / 2) - ratio - sigma*d0m
    let g = |sigma: f64| ((1.0 + (sigma * d01).exp()) / 2.0).ln() - ratio - sigma * d0m;
    let (mut lo, mut hi) = (1e-6, 8.0);
    assert!(
        g(lo) < 0.0 && g(hi) > 0.0,
        "strain anchors do not bracket a solution"
    );
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let sigma = 0.5 * (lo + hi);
    let gain = 1.0 - (sigma * d01).exp();
    let scale = (STRICT_STRAIN_THRESHOLD.ln() - sigma * z0).exp();
    StrainLaw { sigma, scale, gain }
}

/// Full property model: strain law, uptake law, fitness spread, and the
/// retraining learning rate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityModel {
    pub anchors: StrainAnchors,
    #[serde(skip)]
    law: Option<StrainLaw>,
    /// Concentration of the per-linker fitness spread around the
    /// generator quality.
    pub fitness_concentration: f64,
    /// Uptake median at the training strain threshold and zero fitness.
    pub capacity_base: f64,
    /// Uptake log-gain per unit of strain below the training threshold.
    pub capacity_strain_gain: f64,
    /// Uptake log-gain per unit of fitness.
    pub capacity_fitness_gain: f64,
    /// Log-scale sigma of the uptake draw; 0 returns the median.
    pub capacity_sigma: f64,
    /// Retraining learning rate: quality gap shrinks by e^(-rate * examples).
    pub learning_rate: f64,
}

impl Default for QualityModel {
    fn default() -> Self {
        let anchors = StrainAnchors::default();
        QualityModel {
            anchors,
            law: Some(solve_strain_law(&anchors)),
            fitness_concentration: 8.0,
            capacity_base: 0.8,
            capacity_strain_gain: 3.0,
            capacity_fitness_gain: 0.4,
            capacity_sigma: 0.5,
            learning_rate: 5e-3,
        }
    }
}

impl QualityModel {
    /// The solved strain law, solving on first use after deserialization.
    pub fn law(&self) -> StrainLaw {
        match self.law {
            Some(law) => law,
            None => solve_strain_law(&self.anchors),
        }
    }

    /// Re-solves the law after anchor edits (deserialization does this lazily).
    pub fn resolve(&mut self) {
        self.law = Some(solve_strain_law(&self.anchors));
    }

    /// Median strain at a given mean linker fitness.
    pub fn strain_median(&self, fitness: f64) -> f64 {
        let law = self.law();
        law.scale * (1.0 - law.gain * fitness.clamp(0.0, 1.0))
    }

    /// Draws one per-linker latent fitness given the generator quality.
    pub fn sample_fitness<R: Rng + ?Sized>(&self, model_quality: f64, rng: &mut R) -> f64 {
        let q = model_quality.clamp(0.0, 1.0);
        let c = self.fitness_concentration;
        let alpha = c * q + 0.02;
        let beta = c * (1.0 - q) + 0.02;
        Beta::new(alpha, beta).expect("valid beta").sample(rng)
    }

    /// Draws the relaxed-lattice strain for a framework whose linkers have
    /// the given mean fitness.
    pub fn sample_strain<R: Rng + ?Sized>(&self, fitness: f64, rng: &mut R) -> f64 {
        let median = self.strain_median(fitness);
        let sigma = self.law().sigma;
        if sigma <= 0.0 {
            return median;
        }
        LogNormal::new(median.ln(), sigma)
            .expect("valid lognormal")
            .sample(rng)
    }

    /// P(strain < threshold) at a given mean fitness, in closed form.
    pub fn pass_probability(&self, fitness: f64, threshold: f64) -> f64 {
        let law = self.law();
        let z = (threshold.ln() - self.strain_median(fitness).ln()) / law.sigma;
        Normal::new(0.0, 1.0).unwrap().cdf(z)
    }

    /// Draws the gas uptake of an optimized framework.
    pub fn sample_capacity<R: Rng + ?Sized>(
        &self,
        strain: f64,
        fitness: f64,
        rng: &mut R,
    ) -> f64 {
        let ln_median = self.capacity_base.ln()
            + self.capacity_strain_gain * (TRAINING_STRAIN_THRESHOLD - strain)
            + self.capacity_fitness_gain * fitness;
        if self.capacity_sigma <= 0.0 {
            return ln_median.exp();
        }
        LogNormal::new(ln_median, self.capacity_sigma)
            .expect("valid lognormal")
            .sample(rng)
    }

    /// Post-retraining generator quality: the gap to 1 decays exponentially
    /// in the number of training examples.
    pub fn improved_quality(&self, quality: f64, examples: u64) -> f64 {
        let gap = 1.0 - quality.clamp(0.0, 1.0);
        1.0 - gap * (-self.learning_rate * examples as f64).exp()
    }
}
