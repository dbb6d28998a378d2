//! Lempel-Ziv entropy-rate estimate of a location sequence.

use crate::error::{AmtppError, Result};

/// `Λ_i`: length of the shortest substring starting at `i` that does not
/// occur inside `s[..i]`, or `n - i + 1` when every suffix prefix occurs.
pub fn match_lengths<T: PartialEq>(s: &[T]) -> Vec<usize> {
    let n = s.len();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for j in 0..i {
                let mut l = 0;
                while j + l < i && i + l < n && s[j + l] == s[i + l] {
                    l += 1;
                }
                best = best.max(l);
            }
            best + 1
        })
        .collect()
}

/// `(n / Σ Λ_i) · log2 n` bits per symbol.
pub fn lz_entropy_rate<T: PartialEq>(s: &[T]) -> Result<f64> {
    let n = s.len();
    if n < 2 {
        return Err(AmtppError::EntropyUndefined(n));
    }
    let total: usize = match_lengths(s).iter().sum();
    Ok(n as f64 / total as f64 * (n as f64).log2())
}
