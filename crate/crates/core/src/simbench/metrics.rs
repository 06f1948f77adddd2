//! Clustering and variable-selection metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn choose2(x: u64) -> f64 {
    (x * x.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index (Hubert and Arabie). Returns 1 when both
/// partitions are trivial in the same way (the index is undefined there).
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("label lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("ARI needs at least two labels".into()));
    }
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(a.len() as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Mean absolute deviation of the estimated cluster counts from the truth.
pub fn mae_m(estimates: &[usize], m_true: usize) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::InvalidArgument("no estimates".into()));
    }
    let total: usize = estimates.iter().map(|&m| m.abs_diff(m_true)).sum();
    Ok(total as f64 / estimates.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalCounts {
    pub correct: usize,
    pub falsely: usize,
    pub variables_removed: usize,
}

/// Splits removed sensors into noise (correct) and signal (false) removals.
/// `zeroed_columns` is the number of transformed variables whose means are
/// zero in every cluster.
pub fn removal_counts(removed: &[usize], signal: &[usize], noise: &[usize], zeroed_columns: usize) -> Result<RemovalCounts> {
    let mut counts = RemovalCounts {
        correct: 0,
        falsely: 0,
        variables_removed: zeroed_columns,
    };
    for &s in removed {
        if noise.contains(&s) {
            counts.correct += 1;
        } else if signal.contains(&s) {
            counts.falsely += 1;
        } else {
            return Err(Error::UnknownSensor(s));
        }
    }
    Ok(counts)
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], prob: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        len => {
            let pos = prob.clamp(0.0, 1.0) * (len - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Median and quartiles of `values` (NaNs dropped).
pub fn quartiles(values: &[f64]) -> (f64, f64, f64) {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// ARI from explicit pair enumeration.
    fn ari_pairs(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let (mut both, mut only_a, mut only_b, mut pairs) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                pairs += 1.0;
                let sa = a[i] == a[j];
                let sb = b[i] == b[j];
                both += f64::from(u8::from(sa && sb));
                only_a += f64::from(u8::from(sa));
                only_b += f64::from(u8::from(sb));
            }
        }
        let expected = only_a * only_b / pairs;
        (both - expected) / (0.5 * (only_a + only_b) - expected)
    }

    #[test]
    fn identical_and_renamed() {
        let a = [0, 0, 1, 1, 2, 2, 2];
        assert_eq!(ari(&a, &a).unwrap(), 1.0);
        let renamed: Vec<usize> = a.iter().map(|&x| [7, 3, 5][x]).collect();
        assert_eq!(ari(&a, &renamed).unwrap(), 1.0);
    }

    #[test]
    fn four_point_example_matches_pairs() {
        let a = [0, 0, 1, 1];
        let b = [0, 1, 0, 1];
        assert_abs_diff_eq!(ari(&a, &b).unwrap(), ari_pairs(&a, &b), epsilon = 1e-15);
        assert_abs_diff_eq!(ari(&a, &b).unwrap(), -0.5, epsilon = 1e-15);
    }

    #[test]
    fn ari_errors() {
        assert!(ari(&[0, 1], &[0]).is_err());
        assert!(ari(&[0], &[0]).is_err());
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae_m(&[3, 3, 3], 3).unwrap(), 0.0);
        assert_abs_diff_eq!(mae_m(&[2, 3, 4], 3).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        let mut est = vec![2; 30];
        est.extend(vec![3; 150]);
        est.extend(vec![4; 20]);
        assert_abs_diff_eq!(mae_m(&est, 3).unwrap(), (30.0 + 20.0) / 200.0, epsilon = 1e-15);
        assert!(mae_m(&[], 3).is_err());
    }

    #[test]
    fn removal_examples() {
        let signal = [0, 1];
        let noise: Vec<usize> = (2..18).collect();
        let all = removal_counts(&noise, &signal, &noise, 48).unwrap();
        assert_eq!((all.correct, all.falsely, all.variables_removed), (16, 0, 48));
        let none = removal_counts(&[], &signal, &noise, 0).unwrap();
        assert_eq!((none.correct, none.falsely), (0, 0));
        let mixed = removal_counts(&[1, 4, 9], &signal, &noise, 9).unwrap();
        assert_eq!((mixed.correct, mixed.falsely), (2, 1));
        assert!(matches!(removal_counts(&[40], &signal, &noise, 0), Err(Error::UnknownSensor(40))));
    }

    #[test]
    fn quartiles_interpolate() {
        let (q1, med, q3) = quartiles(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!((q1, med, q3), (1.75, 2.5, 3.25));
    }

    proptest! {
        #[test]
        fn ari_matches_pair_enumeration(
            a in proptest::collection::vec(0usize..4, 2..40),
            seed in 0usize..1000,
        ) {
            let b: Vec<usize> = a.iter().enumerate().map(|(i, &x)| (x + (i * 7 + seed) % 3) % 4).collect();
            let direct = ari_pairs(&a, &b);
            let fast = ari(&a, &b).unwrap();
            if direct.is_finite() {
                prop_assert!((direct - fast).abs() < 1e-10);
            }
            prop_assert!(fast <= 1.0 + 1e-12 && fast >= -1.0 - 1e-12);
        }

        #[test]
        fn ari_relabel_invariant(
            a in proptest::collection::vec(0usize..5, 2..60),
            b in proptest::collection::vec(0usize..5, 60),
            shift in 1usize..5,
        ) {
            let b = &b[..a.len()];
            let renamed: Vec<usize> = b.iter().map(|&x| (x + shift) % 5 + 10).collect();
            prop_assert_eq!(ari(&a, b).unwrap(), ari(&a, &renamed).unwrap());
        }
    }
}
