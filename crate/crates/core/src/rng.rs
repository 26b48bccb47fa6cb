//! Deterministic random-stream derivation.
//!
//! Every stochastic draw in a run comes from a stream keyed by what the draw
//! is for, never from a shared generator. Streams are derived from the master
//! seed by hashing the key words, so adding or removing one consumer never
//! perturbs the sequence another consumer sees.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::domain::{SlotId, StageKind};

/// What a stream is consumed for. Keeps duration jitter, outcome draws and
/// payload sizing independent even on the same slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamUse {
    Duration,
    Outcome,
    Payload,
}

impl StreamUse {
    fn word(self) -> u64 {
        match self {
            StreamUse::Duration => 0x11,
            StreamUse::Outcome => 0x22,
            StreamUse::Payload => 0x33,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a ChaCha stream from the master seed and a list of key words.
pub fn derive_stream(master_seed: u64, words: &[u64]) -> ChaCha8Rng {
    let mut state = master_seed ^ 0x6d6f6673746565u64; // domain separator
    for w in words {
        state ^= splitmix64(&mut state) ^ w.wrapping_mul(0x2545f4914f6cdd1d);
        splitmix64(&mut state);
    }
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Stream bank handed to the engine and backends.
#[derive(Debug, Clone, Copy)]
pub struct RngBank {
    master_seed: u64,
}

impl RngBank {
    pub fn new(master_seed: u64) -> Self {
        RngBank { master_seed }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Stream for one (stage, slot, use) triple.
    pub fn slot_stream(&self, stage: StageKind, slot: SlotId, usage: StreamUse) -> ChaCha8Rng {
        derive_stream(
            self.master_seed,
            &[
                stage.order() as u64,
                slot.class.code() as u64,
                slot.node as u64,
                slot.lane as u64,
                usage.word(),
            ],
        )
    }

    /// Stage-global stream (payload sizes, scenario shuffles).
    pub fn stage_stream(&self, stage: StageKind, usage: StreamUse) -> ChaCha8Rng {
        derive_stream(
            self.master_seed,
            &[0xffff, stage.order() as u64, usage.word()],
        )
    }
}
