//! Reproducible random streams.
//!
//! Every (master seed, domain, image, pixel) tuple is hashed into a ChaCha8
//! key, and each simulation stage reads from its own ChaCha stream under that
//! key. ChaCha is counter-based, so a stream depends only on its key and
//! stream id, never on which thread drew from it or in what order pixels were
//! visited.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Simulation stages that consume randomness. The discriminant is the ChaCha
/// stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stage {
    Arrivals = 0,
    QuantumEfficiency = 1,
    DarkCounts = 2,
    Afterpulsing = 3,
    Jitter = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngSeedPolicy {
    pub master_seed: u64,
    /// Separates otherwise identical image indices, e.g. train vs. test or
    /// two lux levels of one dataset.
    pub domain: u64,
}

impl RngSeedPolicy {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed, domain: 0 }
    }

    pub fn with_domain(self, domain: u64) -> Self {
        Self { domain, ..self }
    }

    pub fn stream(&self, image_index: u64, pixel_index: u64, stage: Stage) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key(image_index, pixel_index));
        rng.set_stream(stage as u64);
        rng
    }

    pub fn pixel_streams(&self, image_index: u64, pixel_index: u64) -> StageStreams {
        let key = self.key(image_index, pixel_index);
        let make = |stage: Stage| {
            let mut rng = ChaCha8Rng::from_seed(key);
            rng.set_stream(stage as u64);
            rng
        };
        StageStreams {
            arrivals: make(Stage::Arrivals),
            quantum_efficiency: make(Stage::QuantumEfficiency),
            dark_counts: make(Stage::DarkCounts),
            afterpulsing: make(Stage::Afterpulsing),
            jitter: make(Stage::Jitter),
        }
    }

    fn key(&self, image_index: u64, pixel_index: u64) -> [u8; 32] {
        let mut state = splitmix64(self.master_seed);
        for word in [self.domain, image_index, pixel_index] {
            state = splitmix64(state ^ splitmix64(word));
        }
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        key
    }
}

/// One independent generator per stage for a single pixel.
#[derive(Debug, Clone)]
pub struct StageStreams {
    pub arrivals: ChaCha8Rng,
    pub quantum_efficiency: ChaCha8Rng,
    pub dark_counts: ChaCha8Rng,
    pub afterpulsing: ChaCha8Rng,
    pub jitter: ChaCha8Rng,
}

impl StageStreams {
    /// Streams for a standalone pixel, outside any image.
    pub fn from_seed(seed: u64) -> Self {
        RngSeedPolicy::new(seed).pixel_streams(0, 0)
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
