use amtpp_core::entropy::{lz_entropy_rate, match_lengths};
use proptest::prelude::*;

/// Enumerates candidate substrings by increasing length and scans every
/// window of the prefix.
fn brute_force_lengths(s: &[u8]) -> Vec<usize> {
    let n = s.len();
    (0..n)
        .map(|i| {
            for len in 1..=n - i {
                let cand = &s[i..i + len];
                let seen = i >= len && s[..i].windows(len).any(|w| w == cand);
                if !seen {
                    return len;
                }
            }
            n - i + 1
        })
        .collect()
}

fn brute_force_rate(s: &[u8]) -> f64 {
    let n = s.len() as f64;
    let total: usize = brute_force_lengths(s).iter().sum();
    n / total as f64 * n.log2()
}

#[test]
fn matches_brute_force_on_random_sequences() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let n = rng.random_range(2..=64);
        let alphabet = rng.random_range(1..=6);
        let s: Vec<u8> = (0..n).map(|_| rng.random_range(0..alphabet)).collect();
        assert_eq!(match_lengths(&s), brute_force_lengths(&s), "{s:?}");
        assert_eq!(lz_entropy_rate(&s).unwrap(), brute_force_rate(&s));
    }
}

#[test]
fn all_distinct_is_maximal() {
    let distinct: Vec<u8> = (0..10).collect();
    let top = lz_entropy_rate(&distinct).unwrap();
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let s: Vec<u8> = (0..10).map(|_| rng.random_range(0..10)).collect();
        assert!(lz_entropy_rate(&s).unwrap() <= top);
    }
}

proptest! {
    #[test]
    fn relabeling_preserves_rate(s in prop::collection::vec(0u8..5, 2..40), shift in 1u8..50) {
        let relabeled: Vec<u8> = s.iter().map(|x| (x * 7 + shift) % 251).collect();
        prop_assert_eq!(lz_entropy_rate(&s).unwrap(), lz_entropy_rate(&relabeled).unwrap());
    }
}
