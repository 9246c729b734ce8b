//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`Rng`] derived from one root
//! seed plus a purpose label, so a single integer reproduces an experiment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Scalar, Tensor};
use crate::error::{ensure, Result};

pub type Rng = ChaCha8Rng;

/// Derives an independent stream for `purpose` from `root`.
pub fn derive_rng(root: u64, purpose: &str) -> Rng {
    Rng::seed_from_u64(mix(root, fnv1a(purpose.as_bytes())))
}

/// Like [`derive_rng`] with an extra index (epoch, chain, sample...).
pub fn derive_rng_indexed(root: u64, purpose: &str, index: u64) -> Rng {
    Rng::seed_from_u64(mix(mix(root, fnv1a(purpose.as_bytes())), index))
}

/// Derives a child seed rather than a stream.
pub fn derive_seed(root: u64, purpose: &str) -> u64 {
    mix(root, fnv1a(purpose.as_bytes()))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

// splitmix64 finalizer over the combined words
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.rotate_left(32) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// I.i.d. normal draws with the given mean and standard deviation.
pub fn gaussian_sample<S: Scalar>(
    shape: &[usize],
    mean: f64,
    std: f64,
    rng: &mut Rng,
) -> Result<Tensor<S>> {
    ensure!(std >= 0.0, "standard deviation must be nonnegative, got {std}");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            S::cast(mean + std * e)
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_is_constant() {
        let mut rng = derive_rng(1, "t");
        let t = gaussian_sample::<f32>(&[4, 5], 2.5, 0.0, &mut rng).unwrap();
        assert!(t.data().iter().all(|&x| x == 2.5));
    }

    #[test]
    fn same_seed_same_draws() {
        let a = gaussian_sample::<f32>(&[100], 0.0, 1.0, &mut derive_rng(7, "x")).unwrap();
        let b = gaussian_sample::<f32>(&[100], 0.0, 1.0, &mut derive_rng(7, "x")).unwrap();
        let c = gaussian_sample::<f32>(&[100], 0.0, 1.0, &mut derive_rng(7, "y")).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sample_mean_within_four_sigma() {
        let n = 100_000;
        let t = gaussian_sample::<f64>(&[n], 0.0, 1.0, &mut derive_rng(3, "mean")).unwrap();
        let mean = t.sum_f64() / n as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn negative_std_rejected() {
        assert!(gaussian_sample::<f32>(&[1], 0.0, -1.0, &mut derive_rng(0, "n")).is_err());
    }

    #[test]
    fn indexed_streams_differ() {
        use rand::RngCore;
        let a = derive_rng_indexed(5, "epoch", 0).next_u64();
        let b = derive_rng_indexed(5, "epoch", 1).next_u64();
        assert_ne!(a, b);
    }
}
