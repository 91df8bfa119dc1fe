//! Quantiles and the seeded percentile bootstrap used for confidence intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::par::{self, Exec};

/// Closed interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// Linearly interpolated quantile of ascending `sorted` data, `q ∈ [0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let q = q.clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn fraction_true(xs: &[bool]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().filter(|&&x| x).count() as f64 / xs.len() as f64
    }
}

/// 64-bit FNV-1a, used to derive stable per-entity seeds from names.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer; decorrelates consecutive seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Percentile-bootstrap intervals for two paired proportions and their
/// difference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedBootstrap {
    pub first: Interval,
    pub second: Interval,
    pub difference: Interval,
}

/// Resamples the paired indicators `(a[i], b[i])` with replacement
/// `resamples` times. Each resample draws from its own seeded stream, so
/// the result does not depend on the execution mode.
pub fn paired_proportion_bootstrap(
    a: &[bool],
    b: &[bool],
    resamples: usize,
    level: f64,
    seed: u64,
    exec: Exec,
) -> Option<PairedBootstrap> {
    assert_eq!(a.len(), b.len(), "paired samples differ in length");
    let n = a.len();
    if n == 0 || resamples == 0 {
        return None;
    }
    let reps: Vec<(f64, f64)> = par::map_range(exec, 0..resamples, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, r as u64));
        let (mut sa, mut sb) = (0usize, 0usize);
        for _ in 0..n {
            let i = rng.gen_range(0..n);
            sa += a[i] as usize;
            sb += b[i] as usize;
        }
        (sa as f64 / n as f64, sb as f64 / n as f64)
    });
    let alpha = (1.0 - level) / 2.0;
    let interval = |mut xs: Vec<f64>| {
        xs.sort_unstable_by(|x, y| x.total_cmp(y));
        Interval {
            lo: quantile_sorted(&xs, alpha),
            hi: quantile_sorted(&xs, 1.0 - alpha),
        }
    };
    Some(PairedBootstrap {
        first: interval(reps.iter().map(|r| r.0).collect()),
        second: interval(reps.iter().map(|r| r.1).collect()),
        difference: interval(reps.iter().map(|r| r.0 - r.1).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&xs, 0.0), 1.0);
        assert_eq!(quantile_sorted(&xs, 0.5), 3.0);
        assert_eq!(quantile_sorted(&xs, 1.0), 5.0);
        assert_eq!(quantile_sorted(&xs, 0.125), 1.5);
    }

    #[test]
    fn bootstrap_is_mode_independent() {
        let a: Vec<bool> = (0..200).map(|i| i % 3 == 0).collect();
        let b: Vec<bool> = (0..200).map(|i| i % 5 == 0).collect();
        let s = paired_proportion_bootstrap(&a, &b, 300, 0.95, 7, Exec::Sequential).unwrap();
        let p = paired_proportion_bootstrap(&a, &b, 300, 0.95, 7, Exec::Parallel).unwrap();
        assert_eq!(s, p);
        let pa = fraction_true(&a);
        assert!(s.first.contains(pa));
        assert!(s.difference.lo < s.difference.hi);
    }

    #[test]
    fn degenerate_bootstrap() {
        let a = vec![true; 50];
        let s = paired_proportion_bootstrap(&a, &a, 100, 0.95, 1, Exec::Sequential).unwrap();
        assert_eq!(s.difference, Interval { lo: 0.0, hi: 0.0 });
        assert!(paired_proportion_bootstrap(&[], &[], 100, 0.95, 1, Exec::Sequential).is_none());
    }

    #[test]
    fn seeds_are_stable() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_ne!(mix_seed(1, 0), mix_seed(1, 1));
    }
}
