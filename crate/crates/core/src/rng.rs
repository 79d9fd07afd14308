//! Deterministic, splittable random streams.
//!
//! Every stream is a counter-based generator keyed by a hash of the root seed
//! and the derivation path. Drawing value `i` of a stream never depends on
//! how many other streams were used before it, so per-sample randomness is
//! identical in serial and parallel evaluation.

use rand::RngCore;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// A counter-based random stream identified by `(root_seed, path)`.
///
/// The path is stored as a 64-bit digest; two streams compare equal when
/// they share the root seed, the path digest and the current position.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    root_seed: u64,
    key: u64,
    depth: u32,
    counter: u64,
}

impl RngStream {
    /// Root stream for a seed.
    pub fn root(seed: u64) -> Self {
        Self {
            root_seed: seed,
            key: mix64(seed ^ 0x6A09_E667_F3BC_C908),
            depth: 0,
            counter: 0,
        }
    }

    /// Derive a child stream for `(label, index)`.
    ///
    /// The child depends only on the parent's path, never on how far the
    /// parent has been advanced.
    ///
    /// # Panics
    /// If `label` is empty.
    pub fn derive(&self, label: &str, index: u64) -> Self {
        assert!(!label.is_empty(), "stream label must be non-empty");
        let label_hash = fnv1a64(label.as_bytes());
        let k = mix64(self.key ^ mix64(label_hash.wrapping_add(GOLDEN_GAMMA)));
        let key = mix64(k ^ mix64(index.wrapping_mul(0xD134_2543_DE82_EF95) ^ 0xBF58_476D_1CE4_E5B9));
        Self {
            root_seed: self.root_seed,
            key,
            depth: self.depth + 1,
            counter: 0,
        }
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    /// Number of derivation steps from the root.
    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// The raw 64-bit value at counter position `i`, without advancing.
    #[inline]
    pub fn u64_at(&self, i: u64) -> u64 {
        let z = self.key.wrapping_add(i.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA));
        mix64(mix64(z) ^ self.key.rotate_left(29))
    }

    /// Uniform value in `[0, 1)` at counter position `i`, without advancing.
    #[inline]
    pub fn uniform_at(&self, i: u64) -> f64 {
        to_unit(self.u64_at(i))
    }

    /// Next uniform value in `[0, 1)`; advances the stream.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        to_unit(self.next_raw())
    }

    /// Uniform integer in `0..n` (Lemire's multiply-shift; bias < n / 2^64).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        ((self.next_raw() as u128 * n as u128) >> 64) as u64
    }

    #[inline]
    fn next_raw(&mut self) -> u64 {
        let v = self.u64_at(self.counter);
        self.counter = self.counter.wrapping_add(1);
        v
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_raw() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next_raw()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_raw().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

#[inline]
fn to_unit(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws(mut s: RngStream, n: usize) -> Vec<f64> {
        (0..n).map(|_| s.uniform()).collect()
    }

    #[test]
    fn same_path_same_stream() {
        let a = RngStream::root(42).derive("mask", 0);
        let b = RngStream::root(42).derive("mask", 0);
        assert_eq!(a, b);
        assert_eq!(draws(a, 100), draws(b, 100));
    }

    #[test]
    fn distinct_index_distinct_stream() {
        let a = draws(RngStream::root(42).derive("mask", 0), 10_000);
        let b = draws(RngStream::root(42).derive("mask", 1), 10_000);
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
        let equal = a.iter().zip(&b).filter(|(x, y)| x == y).count();
        assert_eq!(equal, 0);
    }

    #[test]
    fn derive_ignores_parent_position() {
        let mut parent = RngStream::root(7);
        let before = parent.derive("t", 3);
        parent.uniform();
        parent.uniform();
        assert_eq!(before, parent.derive("t", 3));
    }

    #[test]
    fn range_contract() {
        let mut s = RngStream::root(42).derive("t", 5);
        for _ in 0..100_000 {
            let u = s.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn mean_and_variance() {
        let xs = draws(RngStream::root(42).derive("moments", 0), 100_000);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
        assert!((var / (1.0 / 12.0) - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn chi_square_uniformity() {
        // 100 equiprobable cells, 99 dof; p = 0.001 critical value is 148.23.
        let mut s = RngStream::root(42).derive("chi2", 0);
        let mut cells = [0u32; 100];
        let n = 100_000;
        for _ in 0..n {
            cells[(s.uniform() * 100.0) as usize] += 1;
        }
        let expected = n as f64 / 100.0;
        let chi2: f64 = cells
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 148.23, "chi2 {chi2}");
    }

    #[test]
    fn sibling_streams_uncorrelated() {
        let a = draws(RngStream::root(1).derive("x", 0), 50_000);
        let b = draws(RngStream::root(1).derive("x", 1), 50_000);
        let n = a.len() as f64;
        let cov = a.iter().zip(&b).map(|(x, y)| (x - 0.5) * (y - 0.5)).sum::<f64>() / n;
        let rho = cov * 12.0;
        assert!(rho.abs() < 0.02, "rho {rho}");
    }

    #[test]
    fn uniform_at_matches_sequential() {
        let s = RngStream::root(9).derive("pos", 2);
        let seq = draws(s.clone(), 20);
        for (i, v) in seq.iter().enumerate() {
            assert_eq!(*v, s.uniform_at(i as u64));
        }
    }

    #[test]
    #[should_panic]
    fn empty_label_rejected() {
        RngStream::root(1).derive("", 0);
    }
}
