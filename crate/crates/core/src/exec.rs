//! Deterministic replica-level parallelism.
//!
//! Each replica owns an rng stream derived from `(seed, index)` with a
//! splitmix hash, so results are identical whatever the thread count and in
//! the sequential fallback build (feature `parallel` disabled).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// rng stream for replica `index` under master `seed`.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed) ^ splitmix(index.wrapping_add(1))))
}

/// Runs `f` over replica indices `0..n`, collecting outputs in index order.
#[cfg(feature = "parallel")]
pub fn map_replicas<T, F>(n: usize, seed: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64, &mut ChaCha8Rng) -> T + Sync,
{
    use rayon::prelude::*;
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, i);
            f(i, &mut rng)
        })
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_replicas<T, F>(n: usize, seed: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64, &mut ChaCha8Rng) -> T + Sync,
{
    map_replicas_seq(n, seed, f)
}

/// Sequential replica loop with the same rng streams; always available so
/// benchmarks can compare both paths within one build.
pub fn map_replicas_seq<T, F>(n: usize, seed: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64, &mut ChaCha8Rng) -> T + Sync,
{
    (0..n as u64)
        .map(|i| {
            let mut rng = substream(seed, i);
            f(i, &mut rng)
        })
        .collect()
}

/// Caps the rayon thread pool for the current process. No-op without the
/// `parallel` feature; errors from double initialisation are ignored.
pub fn set_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let par = map_replicas(64, 123, |i, rng| {
            use rand::Rng;
            (i, rng.random::<u64>())
        });
        let seq = map_replicas_seq(64, 123, |i, rng| {
            use rand::Rng;
            (i, rng.random::<u64>())
        });
        assert_eq!(par, seq);
    }
}
