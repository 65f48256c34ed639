//! Seeded, counter-addressable random streams.
//!
//! Every run derives all randomness from one 64-bit seed. Each consumer gets
//! its own ChaCha8 stream id, so adding draws in one stage never shifts
//! another stage's numbers. Per-emission link randomness is addressed by
//! emission index, which couples runs that differ only in loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const ALGORITHM: &str = "chacha8-stream";

/// 32-bit words reserved for each emission in the link stream.
const WORDS_PER_SLOT: u128 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Transmitter = 1,
    Link = 2,
    Drift = 3,
    Disclosure = 4,
    Amplification = 5,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Transmitter => "transmitter",
            Stream::Link => "link",
            Stream::Drift => "drift",
            Stream::Disclosure => "disclosure",
            Stream::Amplification => "amplification",
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Link-stream generator repositioned at the start of each emission's slot.
#[derive(Debug, Clone)]
pub struct SlotRng {
    rng: ChaCha8Rng,
}

impl SlotRng {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: stream(seed, Stream::Link),
        }
    }

    pub fn at(&mut self, index: u64) -> &mut ChaCha8Rng {
        self.rng.set_word_pos(index as u128 * WORDS_PER_SLOT);
        &mut self.rng
    }
}

/// Which part of which stream a run consumed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamUsage {
    pub stream: String,
    pub start_word: u128,
    pub end_word: u128,
}

impl StreamUsage {
    pub fn of(which: Stream, rng: &ChaCha8Rng) -> Self {
        Self {
            stream: which.name().to_string(),
            start_word: 0,
            end_word: rng.get_word_pos(),
        }
    }

    pub fn slots(emissions: u64) -> Self {
        Self {
            stream: Stream::Link.name().to_string(),
            start_word: 0,
            end_word: emissions as u128 * WORDS_PER_SLOT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngProvenance {
    pub algorithm: String,
    pub seed: u64,
    pub streams: Vec<StreamUsage>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..8).map(|_| stream(7, Stream::Transmitter).random()).collect();
        let mut r1 = stream(7, Stream::Transmitter);
        let mut r2 = stream(7, Stream::Transmitter);
        let mut r3 = stream(7, Stream::Link);
        let x: u64 = r1.random();
        assert_eq!(x, r2.random::<u64>());
        assert_ne!(x, r3.random::<u64>());
        assert_eq!(a[0], x);
    }

    #[test]
    fn slots_do_not_depend_on_visit_order() {
        let mut s = SlotRng::new(3);
        let first: u64 = s.at(10).random();
        let _: u64 = s.at(4).random();
        let _: u64 = s.at(4).random();
        let again: u64 = s.at(10).random();
        assert_eq!(first, again);
        let other: u64 = s.at(11).random();
        assert_ne!(first, other);
    }
}
