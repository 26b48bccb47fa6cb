//! Steering engine plus cluster simulation for a generative materials
//! screening campaign.
//!
//! The crate models a pipeline that generates candidate linker molecules,
//! assembles them into frameworks, screens the results through progressively
//! more expensive stages, and periodically retrains the generator on the best
//! survivors. Two interchangeable backends execute the work: a deterministic
//! discrete-event simulator ([`sim`]) and a thread-based local runtime that
//! burns real (rescaled) wall time ([`local`]). Policy lives in [`steering`]
//! and never touches a clock directly, so both backends drive the exact same
//! decision code.

pub mod cluster;
pub mod config;
pub mod domain;
pub mod llst;
pub mod local;
pub mod quality;
pub mod rng;
pub mod sim;
pub mod stages;
pub mod steering;
pub mod telemetry;

pub use config::RunConfig;
pub use domain::{SimTime, StageKind, WorkerClass};
