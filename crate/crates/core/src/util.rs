//! Small shared helpers: data-parallel map with a sequential fallback,
//! a stable hash for config fingerprints, and edit distance.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, in parallel when the `parallel` feature is
/// enabled. Output order always matches input order, so deterministic
/// reductions over the result are safe in both builds.
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Sequential map with the same signature as [`par_map`]; kept as an
/// explicit entry point so benchmarks can compare both code paths in a
/// single build.
pub fn seq_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// FNV-1a over bytes; used to fingerprint configs in reports.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Levenshtein distance between two token slices.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance normalized by the longer side; 0.0 for two empty slices.
pub fn normalized_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let n = a.len().max(b.len());
    if n == 0 {
        return 0.0;
    }
    edit_distance(a, b) as f64 / n as f64
}

/// Modular inverse of `a` modulo `m` (requires gcd(a, m) = 1).
pub fn mod_inverse(a: u64, m: u64) -> Option<u64> {
    let (mut old_r, mut r) = (a as i128, m as i128);
    let (mut old_s, mut s) = (1i128, 0i128);
    while r != 0 {
        let q = old_r / r;
        (old_r, r) = (r, old_r - q * r);
        (old_s, s) = (s, old_s - q * s);
    }
    if old_r != 1 {
        return None;
    }
    Some(old_s.rem_euclid(m as i128) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edit_distance_basics() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 9, 3]), 1);
        assert_eq!(edit_distance::<u32>(&[], &[1, 2]), 2);
        assert_eq!(edit_distance(&[1, 2, 3], &[2, 3, 4]), 2);
    }

    #[test]
    fn normalized_empty_is_zero() {
        assert_eq!(normalized_edit_distance::<u32>(&[], &[]), 0.0);
        assert_eq!(normalized_edit_distance(&[1u32], &[]), 1.0);
    }

    #[test]
    fn mod_inverse_roundtrip() {
        for a in [3u64, 5, 7, 11, 13] {
            let inv = mod_inverse(a, 64).unwrap();
            assert_eq!((a * inv) % 64, 1, "a={a}");
        }
        assert_eq!(mod_inverse(2, 64), None);
    }

    #[test]
    fn par_map_matches_seq_map() {
        let xs: Vec<u64> = (0..100).collect();
        let f = |x: &u64| x * x + 1;
        assert_eq!(par_map(&xs, f), seq_map(&xs, f));
    }
}
