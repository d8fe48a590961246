//! Named, counter-derived random streams.
//!
//! A master seed never drives an rng directly. Every consumer asks for a
//! stream by name plus integer coordinates, e.g. `("candidate", [stage, class,
//! position, k])`, and gets a ChaCha8 generator whose key is
//!
//! ```text
//! h0 = splitmix64(master ^ fnv1a64(name))
//! h_{j+1} = splitmix64(h_j ^ coord_j)          for each coordinate
//! key = splitmix64 outputs (h_n + 1·GOLDEN, .. h_n + 4·GOLDEN)  (4 × u64, little endian)
//! ```
//!
//! so results never depend on the order in which streams are consumed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor2;

pub type StreamRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Derives a 64-bit sub-seed from `(master, name, coords)`.
pub fn derive_seed(master: u64, name: &str, coords: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ fnv1a64(name.as_bytes()));
    for &c in coords {
        h = splitmix64(h ^ c);
    }
    h
}

pub fn stream(master: u64, name: &str, coords: &[u64]) -> StreamRng {
    let h = derive_seed(master, name, coords);
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        let word = splitmix64(h.wrapping_add((i as u64 + 1).wrapping_mul(GOLDEN)));
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2 {
    let data: Vec<f64> = (0..rows * cols).map(|_| standard_normal(rng)).collect();
    Tensor2::from_vec(rows, cols, data).expect("normal draws are finite")
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
