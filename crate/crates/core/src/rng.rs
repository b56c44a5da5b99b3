//! Seeded random streams.
//!
//! Every random draw in the workbench comes from a ChaCha stream whose key is
//! derived from `(seed, step, name)`. A dropout mask therefore depends only on
//! the run seed, the training step and the name of the layer drawing it, so a
//! resumed run replays exactly the masks of an uninterrupted one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over bytes; stable across platforms and toolchains.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream keyed by `(seed, step, name)`.
pub fn stream(seed: u64, step: u64, name: &str) -> StreamRng {
    let mut key = [0u8; 32];
    let words = [
        splitmix(seed),
        splitmix(step ^ 0x5851_f42d_4c95_7f2d),
        fnv1a(name.as_bytes()),
        splitmix(seed ^ step.rotate_left(32) ^ fnv1a(name.as_bytes())),
    ];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Dropout context for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardCtx {
    pub mode: Mode,
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            mode: Mode::Eval,
            seed: 0,
            step: 0,
        }
    }

    pub fn train(seed: u64, step: u64) -> Self {
        ForwardCtx {
            mode: Mode::Train,
            seed,
            step,
        }
    }

    pub fn rng(&self, name: &str) -> StreamRng {
        stream(self.seed, self.step, name)
    }
}
