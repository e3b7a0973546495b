//! Seeded random streams and subset enumeration/sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type CamRng = ChaCha8Rng;

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> CamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // exact at every step: acc * (n - i) is divisible by (i + 1)
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// Lexicographic enumeration of the `k`-subsets of `0..n` (sorted positions).
pub struct Combinations {
    n: usize,
    idx: Vec<usize>,
    first: bool,
    done: bool,
}

impl Combinations {
    pub fn new(n: usize, k: usize) -> Self {
        Combinations {
            n,
            idx: (0..k).collect(),
            first: true,
            done: k > n,
        }
    }

    /// Advance to the next subset; `None` when exhausted.
    pub fn next_subset(&mut self) -> Option<&[usize]> {
        if self.done {
            return None;
        }
        if self.first {
            self.first = false;
            return Some(&self.idx);
        }
        let k = self.idx.len();
        let mut i = k;
        while i > 0 {
            i -= 1;
            if self.idx[i] < self.n - k + i {
                self.idx[i] += 1;
                for j in i + 1..k {
                    self.idx[j] = self.idx[j - 1] + 1;
                }
                return Some(&self.idx);
            }
        }
        self.done = true;
        None
    }
}

/// Draws uniformly random `k`-subsets of `0..n` by partial Fisher–Yates.
pub struct SubsetSampler {
    perm: Vec<usize>,
    k: usize,
    out: Vec<usize>,
}

impl SubsetSampler {
    pub fn new(n: usize, k: usize) -> Self {
        assert!(k <= n, "subset larger than population");
        SubsetSampler {
            perm: (0..n).collect(),
            k,
            out: vec![0; k],
        }
    }

    /// A random ordered `k`-tuple of distinct positions.
    pub fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &[usize] {
        let n = self.perm.len();
        for i in 0..self.k {
            let j = rng.random_range(i..n);
            self.perm.swap(i, j);
        }
        self.out.copy_from_slice(&self.perm[..self.k]);
        &self.out
    }

    /// A random subset with positions in increasing order.
    pub fn draw_sorted<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &[usize] {
        self.draw(rng);
        self.out.sort_unstable();
        &self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomial_values() {
        assert_eq!(binomial(5, 2), 10);
        assert_eq!(binomial(12, 6), 924);
        assert_eq!(binomial(3, 5), 0);
        assert_eq!(binomial(1000, 2), 499_500);
        assert_eq!(binomial(10_000, 5000), u128::MAX);
    }

    #[test]
    fn combinations_enumerate_all() {
        let mut c = Combinations::new(5, 3);
        let mut seen = Vec::new();
        while let Some(s) = c.next_subset() {
            assert!(s.windows(2).all(|w| w[0] < w[1]));
            seen.push(s.to_vec());
        }
        assert_eq!(seen.len(), 10);
        assert_eq!(seen[0], vec![0, 1, 2]);
        assert_eq!(seen[9], vec![2, 3, 4]);
        let mut empty = Combinations::new(4, 0);
        assert_eq!(empty.next_subset(), Some(&[][..]));
        assert_eq!(empty.next_subset(), None);
    }

    #[test]
    fn sampler_is_roughly_uniform() {
        let mut rng = stream_rng(3, 0);
        let mut s = SubsetSampler::new(4, 2);
        let mut counts = [0usize; 16];
        for _ in 0..60_000 {
            let sub = s.draw_sorted(&mut rng);
            counts[sub[0] * 4 + sub[1]] += 1;
        }
        let nonzero: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
        assert_eq!(nonzero.len(), 6);
        for c in nonzero {
            assert!((c as f64 - 10_000.0).abs() < 500.0, "{c}");
        }
    }

    #[test]
    fn streams_differ_and_repeat() {
        let a: u64 = stream_rng(7, 1).random();
        let b: u64 = stream_rng(7, 2).random();
        let c: u64 = stream_rng(7, 1).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
