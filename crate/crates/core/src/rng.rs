//! Seeded random streams with snapshot/restore so training runs replay
//! bit-exactly across checkpoint boundaries.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Purpose-keyed stream ids. Each stream is an independent ChaCha8 sequence
/// derived from the master seed, so consuming one stream never perturbs the
/// others.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StreamId {
    Init,
    DiscInit,
    DataSampling,
    Orientation,
    RefMasks,
    Mixup,
    Ensemble,
}

const ALL_STREAMS: [StreamId; 7] = [
    StreamId::Init,
    StreamId::DiscInit,
    StreamId::DataSampling,
    StreamId::Orientation,
    StreamId::RefMasks,
    StreamId::Mixup,
    StreamId::Ensemble,
];

fn stream_index(id: StreamId) -> u64 {
    ALL_STREAMS.iter().position(|&s| s == id).unwrap() as u64
}

/// All random state of a training run.
pub struct RngHub {
    seed: u64,
    streams: Vec<ChaCha8Rng>,
}

/// Serializable snapshot: master seed plus each stream's position.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub word_pos: Vec<u128>,
}

impl RngHub {
    pub fn new(seed: u64) -> Self {
        let streams = ALL_STREAMS
            .iter()
            .map(|&id| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(stream_index(id));
                rng
            })
            .collect();
        Self { seed, streams }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&mut self, id: StreamId) -> &mut ChaCha8Rng {
        &mut self.streams[stream_index(id) as usize]
    }

    /// Independent RNG forked off a stream; consuming the fork does not
    /// advance the hub. Used where work items must be order-independent.
    pub fn fork(&mut self, id: StreamId) -> ChaCha8Rng {
        let s = self.stream(id);
        let mut seed = [0u8; 32];
        s.fill_bytes(&mut seed);
        ChaCha8Rng::from_seed(seed)
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot {
            seed: self.seed,
            word_pos: self.streams.iter().map(|s| s.get_word_pos()).collect(),
        }
    }

    pub fn restore(snap: &RngSnapshot) -> Self {
        let mut hub = Self::new(snap.seed);
        for (rng, &pos) in hub.streams.iter_mut().zip(snap.word_pos.iter()) {
            rng.set_word_pos(pos);
        }
        hub
    }
}

/// Standalone deterministic RNG for one-off jobs (dataset generation).
pub fn rng_for(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    // Tag goes into the seed bytes so differently tagged streams never
    // coincide even for equal (seed, index).
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&index.to_le_bytes());
    for (i, b) in tag.bytes().take(16).enumerate() {
        bytes[16 + i] = b;
    }
    ChaCha8Rng::from_seed(bytes)
}
