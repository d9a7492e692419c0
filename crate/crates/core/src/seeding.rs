//! Named sub-seeds derived from one experiment seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::Matrix;

pub type Rng = ChaCha8Rng;

/// FNV-1a over `bytes`, starting from `seed` folded into the offset basis.
pub fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the named stream `name` under `seed`.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    fnv1a(seed, name.as_bytes())
}

pub fn rng(seed: u64, name: &str) -> Rng {
    Rng::seed_from_u64(sub_seed(seed, name))
}

pub fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Matrix with i.i.d. `N(0, std²)` entries.
pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| gaussian(rng) * std).collect();
    Matrix::new(rows, cols, data).expect("finite gaussian draws")
}
