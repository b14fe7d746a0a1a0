//! Seeded randomness.
//!
//! Every stochastic choice in the crate flows through a ChaCha8 stream so
//! that runs are reproducible from a single `u64` seed. Training randomness
//! is re-derived per step from `(seed, step)`, which makes checkpoint resume
//! trivially exact: no RNG state needs to be persisted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mat::Mat;
use crate::real::Real;

pub type SeedRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeedRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// splitmix64 finalizer; decorrelates nearby (seed, step) pairs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for one training step.
pub fn step_rng(seed: u64, step: u64) -> SeedRng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(step)))
}

/// Independent stream for a named substream of a run seed.
pub fn substream(seed: u64, tag: u64) -> SeedRng {
    ChaCha8Rng::seed_from_u64(mix(seed.wrapping_add(0x5851_f42d_4c95_7f2d).wrapping_mul(tag | 1)))
}

/// Standard normal draw via Box-Muller. One value per call, always consuming
/// exactly two uniforms, so draw counts stay easy to reason about.
pub fn normal_f64<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1], avoids ln(0)
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn fill_normal<T: Real, R: Rng>(m: &mut Mat<T>, std: f64, rng: &mut R) {
    for v in m.as_mut_slice() {
        *v = T::from_f64(normal_f64(rng) * std);
    }
}

pub fn normal_mat<T: Real, R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat<T> {
    let mut m = Mat::zeros(rows, cols);
    fill_normal(&mut m, std, rng);
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| step_rng(7, 3).gen()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let x: u64 = step_rng(7, 3).gen();
        let y: u64 = step_rng(7, 4).gen();
        let z: u64 = step_rng(8, 3).gen();
        assert_ne!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut rng = seeded(11);
        let n = 20_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let v = normal_f64(&mut rng);
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.03, "mean={mean}");
        assert!((var - 1.0).abs() < 0.05, "var={var}");
    }
}
