use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Scalar;

/// The generator used everywhere randomness enters a run.
pub type SeededRng = ChaCha8Rng;

/// Independent stream for `purpose` under a run seed. Streams with different
/// tags never overlap, so adding a new consumer does not perturb existing ones.
pub fn derive_rng(seed: u64, purpose: &str) -> SeededRng {
    // FNV-1a over the tag selects the ChaCha stream
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// Prompt initialisation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Normal with std 0.02, resampled outside ±2 std.
    TruncatedNormal,
    /// Normal with variance 2 / fan_in.
    #[default]
    He,
}

pub const TRUNC_NORMAL_STD: f64 = 0.02;

impl Init {
    pub fn sample<T: Scalar>(self, rng: &mut SeededRng, n: usize, fan_in: usize) -> Vec<T> {
        match self {
            Init::TruncatedNormal => truncated_normal(rng, n, TRUNC_NORMAL_STD),
            Init::He => he_normal(rng, n, fan_in),
        }
    }
}

/// `n` draws from N(0, std²) restricted to [-2·std, 2·std] by rejection.
pub fn truncated_normal<T: Scalar>(rng: &mut SeededRng, n: usize, std: f64) -> Vec<T> {
    (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
        .collect()
}

pub fn he_normal<T: Scalar>(rng: &mut SeededRng, n: usize, fan_in: usize) -> Vec<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::of(z * std)
        })
        .collect()
}
