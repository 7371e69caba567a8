//! Counter-based random streams.
//!
//! Every random quantity in the crate is addressed by `(seed, stream, index)`.
//! The ChaCha key is derived from `(seed, stream)` and the ChaCha stream
//! selector is the index, so draw `i` of a stream can be produced by any
//! worker without replaying draws `0..i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Named stream identifiers used by the pipeline.
pub mod streams {
    pub const FULL_DATA: u64 = 1;
    pub const VIEW_DATA: u64 = 2;
    pub const CALIBRATION: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const INIT: u64 = 6;
    pub const TRAIN: u64 = 7;
    pub const EVAL: u64 = 8;
    pub const SAMPLER: u64 = 9;
    pub const SPEC: u64 = 10;
    pub const RADEMACHER: u64 = 11;
    pub const DUPLICATE_POOL: u64 = 12;
    pub const TEST_DATA: u64 = 13;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Substream {
    pub seed: u64,
    pub stream: u64,
}

impl Substream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// Derives an independent substream, e.g. one per view or per seed.
    pub fn child(&self, tag: u64) -> Self {
        let mut state = self.stream ^ tag.rotate_left(17) ^ 0xD1B5_4A32_D192_ED03;
        Self {
            seed: self.seed,
            stream: splitmix64(&mut state) ^ tag,
        }
    }

    fn key(&self) -> [u8; 32] {
        let mut state = self.seed ^ self.stream.wrapping_mul(0xA24B_AED4_963E_E407);
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        key
    }

    /// Generator for draw `index` of this stream.
    pub fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key());
        rng.set_stream(index);
        rng
    }
}

pub fn fill_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    fill_normal(rng, &mut v);
    v
}
