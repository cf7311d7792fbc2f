use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PooledStats {
    pub passed: usize,
    pub total: usize,
    /// `Σ passed / Σ total`, as a fraction.
    pub pooled_rate: f64,
    pub mean_percent: f64,
    /// Population standard deviation (divisor N) of the per-split percentages.
    pub std_percent: f64,
}

/// Aggregates per-split `(passed, total)` counts.
pub fn pooled_stats(counts: &[(usize, usize)]) -> Result<PooledStats> {
    if counts.is_empty() {
        return Err(Error::Empty("per-split counts"));
    }
    if counts.iter().any(|&(_, t)| t == 0) {
        return Err(Error::Config("every split needs a positive total".into()));
    }
    let pct: Vec<f64> = counts.iter().map(|&(p, t)| 100.0 * p as f64 / t as f64).collect();
    let n = pct.len() as f64;
    let mean = pct.iter().sum::<f64>() / n;
    let var = pct.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n;
    let passed = counts.iter().map(|c| c.0).sum();
    let total = counts.iter().map(|c| c.1).sum();
    Ok(PooledStats {
        passed,
        total,
        pooled_rate: passed as f64 / total as f64,
        mean_percent: mean,
        std_percent: var.sqrt(),
    })
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut acc = 0.0f64;
    out.push(0.0);
    for k in 1..=n {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

/// Two-sided Fisher exact test on `[[a, b], [c, d]]`.
///
/// Sums the hypergeometric probabilities of every table with the observed
/// margins whose probability does not exceed the observed table's
/// (relative slack 1e-7 for floating-point ties). A degenerate margin leaves
/// a single possible table, so p = 1.
pub fn fisher_exact_two_sided(a: usize, b: usize, c: usize, d: usize) -> f64 {
    let (r1, r2, c1) = (a + b, c + d, a + c);
    let n = r1 + r2;
    if r1 == 0 || r2 == 0 || c1 == 0 || c1 == n {
        return 1.0;
    }
    let lf = ln_factorials(n);
    let ln_choose = |n: usize, k: usize| lf[n] - lf[k] - lf[n - k];
    let denom = ln_choose(n, c1);
    let ln_p = |x: usize| ln_choose(r1, x) + ln_choose(r2, c1 - x) - denom;

    let observed = ln_p(a);
    let lo = c1.saturating_sub(r2);
    let hi = r1.min(c1);
    let cutoff = observed + (1.0f64 + 1e-7).ln();
    let p: f64 = (lo..=hi).map(ln_p).filter(|&lp| lp <= cutoff).map(f64::exp).sum();
    p.min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WilcoxonResult {
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub w_plus: f64,
    pub p_value: f64,
}

/// Largest `n` accepted for exhaustive sign enumeration.
pub const WILCOXON_MAX_N: usize = 26;

/// Midranks (1-based) of `values`, ties sharing the average rank.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Exact two-sided Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped, tied |differences| get midranks, and
/// `p = P(|W⁺ − μ| ≥ |w_obs − μ|)` over all `2ⁿ` equally likely sign
/// assignments. With no non-zero differences, p = 1.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<WilcoxonResult> {
    if pairs.is_empty() {
        return Err(Error::Empty("wilcoxon pairs"));
    }
    let diffs: Vec<f64> = pairs.iter().map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("paired difference".into()));
    }
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult { n: 0, w_plus: 0.0, p_value: 1.0 });
    }
    if n > WILCOXON_MAX_N {
        return Err(Error::Config(format!("{n} pairs exceed the exact-enumeration limit {WILCOXON_MAX_N}")));
    }
    let ranks = midranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();

    // midranks are multiples of ½, so doubled ranks are exact integers
    let doubled: Vec<i64> = ranks.iter().map(|r| (r * 2.0).round() as i64).collect();
    let total: i64 = doubled.iter().sum();
    let obs = (w_plus * 2.0).round() as i64;
    let obs_dev = (2 * obs - total).abs();
    let mut extreme = 0u64;
    for mask in 0u64..(1u64 << n) {
        let mut w = 0i64;
        let mut m = mask;
        while m != 0 {
            let bit = m.trailing_zeros() as usize;
            w += doubled[bit];
            m &= m - 1;
        }
        if (2 * w - total).abs() >= obs_dev {
            extreme += 1;
        }
    }
    Ok(WilcoxonResult { n, w_plus, p_value: extreme as f64 / (1u64 << n) as f64 })
}

/// Null distribution of W⁺ for ranks `1..=n` without ties: entry `w` is the
/// number of subsets of `{1..n}` summing to `w` (out of `2ⁿ`).
pub fn signed_rank_null_counts(n: usize) -> Vec<u64> {
    let max = n * (n + 1) / 2;
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    for k in 1..=n {
        for w in (k..=max).rev() {
            counts[w] += counts[w - k];
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooled_examples() {
        let s = pooled_stats(&[(9, 16), (6, 16), (3, 16), (3, 16), (2, 16)]).unwrap();
        assert!((s.mean_percent - 28.75).abs() < 1e-12);
        assert!((s.std_percent - 16.1).abs() < 0.01);
        assert_eq!((s.passed, s.total), (23, 80));

        let s = pooled_stats(&[(3, 16), (1, 16), (1, 16), (2, 16), (2, 16)]).unwrap();
        assert!((s.mean_percent - 11.25).abs() < 1e-12);
        assert!((s.std_percent - 4.7).abs() < 0.05);

        let s = pooled_stats(&[(4, 16); 5]).unwrap();
        assert_eq!((s.mean_percent, s.std_percent), (25.0, 0.0));

        assert!(pooled_stats(&[]).is_err());
        assert!(pooled_stats(&[(0, 0)]).is_err());
    }

    #[test]
    fn pooled_std_is_permutation_invariant() {
        let a = pooled_stats(&[(5, 16), (0, 16), (4, 16), (5, 16), (6, 16)]).unwrap();
        let b = pooled_stats(&[(6, 16), (5, 16), (0, 16), (5, 16), (4, 16)]).unwrap();
        assert!((a.std_percent - b.std_percent).abs() < 1e-12);
    }

    #[test]
    fn fisher_reference_values() {
        // cross-checked against scipy.stats.fisher_exact
        assert!((fisher_exact_two_sided(23, 57, 18, 62) - 0.469_120_059_650_763_9).abs() < 1e-10);
        assert!((fisher_exact_two_sided(9, 71, 18, 62) - 0.090_004_600_797_114_7).abs() < 1e-10);
        assert!((fisher_exact_two_sided(31, 49, 20, 60) - 0.089_288_366_722_767_49).abs() < 1e-10);
        assert!((fisher_exact_two_sided(3, 1, 1, 3) - 0.485_714_285_714_285_65).abs() < 1e-12);
    }

    #[test]
    fn fisher_identical_columns_and_degenerate_margins() {
        assert!((fisher_exact_two_sided(7, 7, 7, 7) - 1.0).abs() < 1e-12);
        assert_eq!(fisher_exact_two_sided(0, 0, 3, 4), 1.0);
        assert_eq!(fisher_exact_two_sided(0, 5, 0, 4), 1.0);
        assert_eq!(fisher_exact_two_sided(0, 0, 0, 0), 1.0);
    }

    #[test]
    fn wilcoxon_examples() {
        let r = wilcoxon_signed_rank(&[(1.0, 0.0), (2.0, 0.0), (3.0, 0.0)]).unwrap();
        assert_eq!((r.n, r.w_plus, r.p_value), (3, 6.0, 0.25));

        let r = wilcoxon_signed_rank(&[(1.0, 0.0), (0.0, 1.0)]).unwrap();
        assert_eq!(r.p_value, 1.0);

        let r = wilcoxon_signed_rank(&[(3.0, 7.0), (1.0, 2.0), (1.0, 5.0), (2.0, 4.0), (2.0, 0.0)]).unwrap();
        assert_eq!(r.w_plus, 2.5);
        assert_eq!(r.p_value, 0.25);

        let r = wilcoxon_signed_rank(&[(1.0, 1.0), (2.0, 2.0)]).unwrap();
        assert_eq!((r.n, r.p_value), (0, 1.0));
        assert!(wilcoxon_signed_rank(&[]).is_err());
    }

    #[test]
    fn midranks_average_ties() {
        assert_eq!(midranks(&[4.0, 1.0, 4.0, 2.0, 2.0]), vec![4.5, 1.0, 4.5, 2.5, 2.5]);
    }

    #[test]
    fn null_counts_small_n() {
        assert_eq!(signed_rank_null_counts(3), vec![1, 1, 1, 2, 1, 1, 1]);
        assert_eq!(signed_rank_null_counts(0), vec![1]);
    }
}
