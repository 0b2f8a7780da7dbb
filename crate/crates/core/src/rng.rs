//! Seeded randomness. Every stochastic operation draws from a `ChaCha8Rng`
//! derived from a user seed, so results are bit-reproducible across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

pub type PiuRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> PiuRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream from `seed` for a named purpose.
pub fn substream(seed: u64, stream: u64) -> PiuRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `w ~ Dir(alpha * 1_k)` via normalized Gamma draws.
pub fn dirichlet(rng: &mut impl Rng, k: usize, alpha: f64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated by caller");
    let mut w: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|x| *x /= total);
    } else {
        // every Gamma draw underflowed (tiny alpha): fall back to a vertex
        w.iter_mut().for_each(|x| *x = 0.0);
        w[0] = 1.0;
    }
    w
}
