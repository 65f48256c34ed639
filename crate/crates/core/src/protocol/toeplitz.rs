//! Toeplitz-matrix universal hash over GF(2).
//!
//! Output bit `i` is `⊕_j r[i + j]·k[n − 1 − j]`, so the matrix entry in
//! row `i`, column `c` is `r[i + n − 1 − c]` and depends only on `i − c`.
//! The `n + m − 1` diagonal bits come from the amplification stream keyed
//! by the seed; rows are evaluated 64 columns at a time.

use rand::Rng;

use crate::rng::{self, Stream};

fn pack(bits: impl Iterator<Item = bool>, len: usize) -> Vec<u64> {
    let mut words = vec![0u64; len.div_ceil(64) + 1];
    for (i, b) in bits.enumerate() {
        words[i / 64] |= (b as u64) << (i % 64);
    }
    words
}

/// 64 bits of `r` starting at bit `offset`.
fn window(r: &[u64], offset: usize) -> u64 {
    let (w, s) = (offset / 64, offset % 64);
    if s == 0 {
        r[w]
    } else {
        (r[w] >> s) | (r[w + 1] << (64 - s))
    }
}

/// The `n + m − 1` diagonal bits of the matrix for `seed`, packed LSB-first.
pub fn diagonal(seed: u64, n: usize, m: usize) -> Vec<u64> {
    let len = n + m.max(1) - 1;
    let mut rng = rng::stream(seed, Stream::Amplification);
    // one spare word so `window` can always read w + 1
    let mut words: Vec<u64> = (0..len.div_ceil(64) + 2).map(|_| rng.random()).collect();
    let full = len / 64;
    if !len.is_multiple_of(64) {
        words[full] &= (1u64 << (len % 64)) - 1;
    }
    for w in words.iter_mut().skip(len.div_ceil(64)) {
        *w = 0;
    }
    words
}

/// Hash `key` down to `m` bits with the matrix drawn from `seed`.
pub fn hash(key: &[bool], m: usize, seed: u64) -> Vec<bool> {
    let n = key.len();
    if m == 0 || n == 0 {
        return Vec::new();
    }
    let r = diagonal(seed, n, m);
    let k = pack(key.iter().rev().copied(), n);
    let words = n.div_ceil(64);
    let tail_mask = if n.is_multiple_of(64) { u64::MAX } else { (1u64 << (n % 64)) - 1 };
    (0..m)
        .map(|i| {
            let mut acc = 0u64;
            for (w, &kw) in k.iter().enumerate().take(words) {
                let mut x = window(&r, i + 64 * w) & kw;
                if w + 1 == words {
                    x &= tail_mask;
                }
                acc ^= x;
            }
            acc.count_ones() % 2 == 1
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Bit-by-bit matrix-vector product over GF(2).
    fn naive(key: &[bool], m: usize, seed: u64) -> Vec<bool> {
        let n = key.len();
        let r = diagonal(seed, n, m);
        let bit = |t: usize| (r[t / 64] >> (t % 64)) & 1 == 1;
        (0..m)
            .map(|i| (0..n).fold(false, |acc, c| acc ^ (bit(i + n - 1 - c) & key[c])))
            .collect()
    }

    #[test]
    fn lengths_and_determinism() {
        let key: Vec<bool> = (0..1024).map(|i| (i * 7) % 3 == 0).collect();
        let a = hash(&key, 256, 11);
        assert_eq!(a.len(), 256);
        assert_eq!(a, hash(&key, 256, 11));
        assert_ne!(a, hash(&key, 256, 12));
        assert!(hash(&key, 0, 11).is_empty());
        assert!(hash(&[], 5, 11).is_empty());
    }

    #[test]
    fn linear_over_gf2() {
        let a: Vec<bool> = (0..300).map(|i| i % 5 == 1).collect();
        let b: Vec<bool> = (0..300).map(|i| i % 3 == 2).collect();
        let x: Vec<bool> = a.iter().zip(&b).map(|(p, q)| p ^ q).collect();
        let (ha, hb, hx) = (hash(&a, 100, 4), hash(&b, 100, 4), hash(&x, 100, 4));
        for i in 0..100 {
            assert_eq!(hx[i], ha[i] ^ hb[i]);
        }
        assert!(hash(&vec![false; 300], 100, 4).iter().all(|&v| !v));
    }

    #[test]
    fn output_bits_unbiased_over_seeds() {
        let key: Vec<bool> = (0..512).map(|i| (i * 13 + 5) % 7 < 3).collect();
        let trials = 1000u64;
        let mut ones = [0u64; 64];
        for seed in 0..trials {
            for (i, b) in hash(&key, 64, seed).into_iter().enumerate() {
                ones[i] += b as u64;
            }
        }
        let sigma = (trials as f64 * 0.25).sqrt();
        for (i, &c) in ones.iter().enumerate() {
            assert!((c as f64 - trials as f64 / 2.0).abs() < 5.0 * sigma, "bit {i}: {c}");
        }
    }

    proptest! {
        #[test]
        fn packed_matches_naive(key in proptest::collection::vec(any::<bool>(), 1..300), m in 1usize..150, seed in 0u64..1000) {
            prop_assert_eq!(hash(&key, m, seed), naive(&key, m, seed));
        }
    }
}
