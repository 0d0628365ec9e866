//! Reproducible random streams.
//!
//! A stream is addressed by a path of integers below a master seed, e.g.
//! `(test, replicate)` or `(measure, vertex path)`. The path is folded into a
//! 64-bit key with a SplitMix64-style mixer and expanded into a ChaCha8 key,
//! so the draws of a stream depend only on its address and never on which
//! worker evaluates it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::stats::check_batching;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Address of an independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn new(master_seed: u64) -> Self {
        StreamKey(mix64(master_seed ^ 0x6F76_6572_6C61_7073))
    }

    /// Key of sub-stream `index`.
    #[inline]
    pub fn child(self, index: u64) -> Self {
        StreamKey(mix64(self.0.wrapping_add(GOLDEN) ^ mix64(index.wrapping_add(1).wrapping_mul(GOLDEN))))
    }

    /// Key of a sub-stream named by a path.
    pub fn path(self, path: &[u32]) -> Self {
        path.iter()
            .fold(self.child(path.len() as u64 | 1 << 40), |k, &i| k.child(i as u64))
    }

    /// Key of a sub-stream named by a label, for separating arms of a test.
    pub fn named(self, label: &str) -> Self {
        label.bytes().fold(self.child(1 << 41), |k, b| k.child(b as u64))
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        let mut s = self.0;
        for chunk in seed.chunks_mut(8) {
            s = s.wrapping_add(GOLDEN);
            chunk.copy_from_slice(&mix64(s).to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

/// The random stream `stream_index` under `master_seed`.
pub fn rng_stream(master_seed: u64, stream_index: u64) -> ChaCha8Rng {
    StreamKey::new(master_seed).child(stream_index).rng()
}

/// Evaluates `f` on replicates `0..replicates`, replicate `r` drawing from
/// stream `key.child(r)`. Results are returned in replicate order, so any
/// later reduction is independent of the worker count.
pub fn map_replicates<T, F>(key: StreamKey, replicates: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut ChaCha8Rng) -> T + Sync + Send,
{
    (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = key.child(r as u64).rng();
            f(r, &mut rng)
        })
        .collect()
}

/// Runs replicates `0..replicates` in `batches` contiguous batches. `f`
/// adds the replicate's contribution into a row of `width` accumulators;
/// each batch's row is returned divided by the batch size. Replicates within
/// a batch are summed in order.
pub fn batch_means<F>(key: StreamKey, replicates: usize, batches: usize, width: usize, f: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(usize, &mut ChaCha8Rng, &mut [f64]) -> Result<()> + Sync + Send,
{
    check_batching(replicates, batches)?;
    let size = replicates / batches;
    (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![0.0; width];
            for r in b * size..(b + 1) * size {
                let mut rng = key.child(r as u64).rng();
                f(r, &mut rng, &mut acc)?;
            }
            acc.iter_mut().for_each(|x| *x /= size as f64);
            Ok(acc)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_address_same_draws() {
        let a: Vec<u64> = (0..16).map({ let mut r = rng_stream(7, 3); move |_| r.gen() }).collect();
        let b: Vec<u64> = (0..16).map({ let mut r = rng_stream(7, 3); move |_| r.gen() }).collect();
        assert_eq!(a, b);
        let c: Vec<u64> = (0..16).map({ let mut r = rng_stream(7, 4); move |_| r.gen() }).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let n = 10_000;
        for (i, j) in [(0u64, 1u64), (5, 6), (0, 1 << 33)] {
            let mut x = rng_stream(11, i);
            let mut y = rng_stream(11, j);
            let (mut sxy, mut sx, mut sy, mut sxx, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for _ in 0..n {
                let a: f64 = x.gen();
                let b: f64 = y.gen();
                sxy += a * b;
                sx += a;
                sy += b;
                sxx += a * a;
                syy += b * b;
            }
            let nf = n as f64;
            let cov = sxy / nf - sx * sy / nf / nf;
            let corr = cov / ((sxx / nf - (sx / nf).powi(2)) * (syy / nf - (sy / nf).powi(2))).sqrt();
            // SE of a null sample correlation is 1/sqrt(n)
            assert!(corr.abs() < 3.0 / nf.sqrt(), "corr {corr} between streams {i} and {j}");
        }
    }

    #[test]
    fn map_replicates_independent_of_pool_size() {
        let key = StreamKey::new(99);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| map_replicates(key, 500, |_, rng| rng.gen::<u64>()))
        };
        assert_eq!(run(1), run(8));
    }

    #[test]
    fn path_keys_differ() {
        let k = StreamKey::new(1);
        assert_ne!(k.path(&[0, 1]), k.path(&[1, 0]));
        assert_ne!(k.path(&[0]), k.path(&[0, 0]));
        assert_ne!(k.path(&[]), k);
        assert_ne!(k.named("tilted"), k.named("untilted"));
    }
}
