//! Deterministic random streams.
//!
//! Every random decision in training and evaluation draws from a stream
//! addressed by `(master seed, purpose, index)`. Streams are independent,
//! so consuming one never shifts another; that is what makes checkpoint
//! resume bit-exact without serializing generator state, and what keeps
//! per-attribute training isolated.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over arbitrary bytes. Stable across platforms and releases,
/// unlike the std hasher, which is randomized per process.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// A seeded stream for one purpose at one index.
pub fn stream(master_seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut bytes = Vec::with_capacity(purpose.len() + 17);
    bytes.extend_from_slice(&master_seed.to_le_bytes());
    bytes.extend_from_slice(purpose.as_bytes());
    bytes.push(b':');
    bytes.extend_from_slice(&index.to_le_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a64(&bytes))
}

/// Standard-normal draws in row-major order.
pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
}

/// One categorical draw from explicit probabilities (assumed to sum to ~1).
/// Falls through to the last category on accumulated rounding.
pub fn categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
