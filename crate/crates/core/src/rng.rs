//! Named, seedable random streams.
//!
//! Every consumer (parameter init, data synthesis, augmentation, shuffling)
//! draws from its own ChaCha stream selected by a name hash, so adding draws
//! in one place never shifts the numbers seen by another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Root of a family of independent random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    seed: u64,
}

/// 64-bit FNV-1a; stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        SeedTree { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generator for the stream called `name`.
    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(name.as_bytes()));
        rng
    }

    /// A child tree whose streams are disjoint from this one's.
    pub fn split(&self, name: &str) -> SeedTree {
        SeedTree {
            seed: self.stream(name).gen(),
        }
    }
}

/// Tensor with entries drawn uniformly from `[lo, hi)`.
pub fn uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(lo..hi)))
}
