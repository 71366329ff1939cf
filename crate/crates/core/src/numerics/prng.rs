use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use super::Tensor;

/// Position in a counter-based random sequence.
///
/// The keystream is ChaCha8 keyed by `seed`, with `stream_id` selecting the
/// ChaCha stream and `counter` the 32-bit word offset inside it. Any worker can
/// jump to any `(seed, stream_id, counter)` without shared state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PrngStream {
    pub seed: u64,
    pub stream_id: u64,
    pub counter: u64,
}

impl PrngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self {
            seed,
            stream_id,
            counter: 0,
        }
    }

    /// Stream whose id is a fixed mix of `parts`, so call sites can key
    /// streams by tuples such as `(domain, ref, step)`.
    pub fn keyed(seed: u64, parts: &[u64]) -> Self {
        let mut h = 0x243f_6a88_85a3_08d3u64;
        for &p in parts {
            h = splitmix64(h ^ p);
        }
        Self::new(seed, h)
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng.set_word_pos(self.counter as u128);
        rng
    }

    /// Draws `n` raw 32-bit words and returns them with the advanced stream.
    pub fn words(self, n: usize) -> (Vec<u32>, Self) {
        let mut rng = self.rng();
        let out = (0..n).map(|_| rng.next_u32()).collect();
        (out, self.advanced(n as u64))
    }

    /// Uniform samples in `[0, 1)`.
    pub fn uniform(self, n: usize) -> (Vec<f32>, Self) {
        let (w, next) = self.words(n);
        (w.into_iter().map(|x| (x >> 8) as f32 / (1u32 << 24) as f32).collect(), next)
    }

    pub fn advanced(self, words: u64) -> Self {
        Self {
            counter: self.counter + words,
            ..self
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// I.i.d. standard normal tensor via Box-Muller. Every pair of outputs
/// consumes exactly two words, so the returned stream position depends only
/// on the element count.
pub fn gaussian_sample(dims: &[usize], stream: PrngStream) -> (Tensor, PrngStream) {
    let n: usize = dims.iter().product();
    let pairs = n.div_ceil(2);
    let (words, next) = stream.words(pairs * 2);
    let mut data = Vec::with_capacity(pairs * 2);
    for pair in words.chunks_exact(2) {
        // (0, 1] keeps ln finite
        let u1 = (pair[0] as f64 + 1.0) / 4_294_967_296.0;
        let u2 = pair[1] as f64 / 4_294_967_296.0;
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        data.push((r * theta.cos()) as f32);
        data.push((r * theta.sin()) as f32);
    }
    data.truncate(n);
    (Tensor::from_parts(dims.to_vec(), data), next)
}
