//! Shared statistical machinery: the one-sided paired Wilcoxon
//! signed-rank test, Holm-Bonferroni step-down correction, and t-based
//! p-values for regression coefficients.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Largest n for which the exact signed-rank null distribution is used;
/// above it, the normal approximation with continuity and tie correction.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// 1-based ascending ranks, with ties sharing their mean rank.
pub fn average_ranks(magnitudes: &[f64]) -> Vec<f64> {
    let n = magnitudes.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| magnitudes[a].total_cmp(&magnitudes[b]));
    let mut ranks = vec![0.0; n];
    let mut pos = 0;
    while pos < n {
        let mut end = pos;
        while end + 1 < n && magnitudes[order[end + 1]] == magnitudes[order[pos]] {
            end += 1;
        }
        // positions pos..=end hold equal magnitudes; 1-based ranks averaged
        let avg = (pos + end + 2) as f64 / 2.0;
        for &idx in &order[pos..=end] {
            ranks[idx] = avg;
        }
        pos = end + 1;
    }
    ranks
}

/// One-sided paired Wilcoxon signed-rank test: p-value for the
/// alternative "differences tend to be positive". Zero differences are
/// dropped; tied magnitudes get average ranks. Exact null distribution
/// for n <= 25, normal approximation with continuity correction above.
/// All differences zero -> p = 1.
pub fn wilcoxon_signed_rank_one_sided(differences: &[f64]) -> f64 {
    let nonzero: Vec<f64> = differences.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return 1.0;
    }
    let magnitudes: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&magnitudes);
    let w_plus: f64 = nonzero
        .iter()
        .zip(&ranks)
        .filter(|(&d, _)| d > 0.0)
        .map(|(_, &r)| r)
        .sum();
    if n <= WILCOXON_EXACT_MAX_N {
        exact_upper_tail(&ranks, w_plus)
    } else {
        normal_upper_tail(&ranks, w_plus, n)
    }
}

/// P(W+ >= w) under the null, by dynamic programming over doubled ranks
/// (average ranks are half-integers, so doubling makes them integers).
fn exact_upper_tail(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|&r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    // counts[s] = number of sign assignments with doubled rank sum s
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let threshold = (2.0 * w_plus).round() as usize;
    let tail: f64 = counts[threshold.min(total)..].iter().sum();
    tail / 2f64.powi(ranks.len() as i32)
}

fn normal_upper_tail(ranks: &[f64], w_plus: f64, n: usize) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    // tie correction: subtract sum(t^3 - t)/48 over tied groups
    let mut sorted: Vec<f64> = ranks.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut tie_term = 0.0;
    let mut pos = 0;
    while pos < n {
        let mut end = pos;
        while end + 1 < n && sorted[end + 1] == sorted[pos] {
            end += 1;
        }
        let t = (end - pos + 1) as f64;
        tie_term += t * t * t - t;
        pos = end + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = (w_plus - mean - 0.5) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    1.0 - normal.cdf(z)
}

/// Holm-Bonferroni step-down decisions at family-wise level `alpha`.
/// Returns one reject/accept flag per input hypothesis, in input order.
pub fn holm_decisions(p_values: &[f64], alpha: f64) -> Vec<bool> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));
    let mut rejected = vec![false; m];
    for (step, &idx) in order.iter().enumerate() {
        if p_values[idx] <= alpha / (m - step) as f64 {
            rejected[idx] = true;
        } else {
            break;
        }
    }
    rejected
}

/// Two-sided p-value of a t statistic with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> Result<f64> {
    if !(df > 0.0) {
        return Err(Error::Stats(format!(
            "t-test needs positive degrees of freedom, got {df}"
        )));
    }
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Stats(format!("t-distribution: {e}")))?;
    Ok(2.0 * (1.0 - dist.cdf(t.abs())))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Full 2^n enumeration of sign assignments, the exact-test oracle.
    fn wilcoxon_enumeration_oracle(differences: &[f64]) -> f64 {
        let nonzero: Vec<f64> = differences.iter().copied().filter(|&d| d != 0.0).collect();
        let n = nonzero.len();
        if n == 0 {
            return 1.0;
        }
        let magnitudes: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
        let ranks = average_ranks(&magnitudes);
        let observed: f64 = nonzero
            .iter()
            .zip(&ranks)
            .filter(|(&d, _)| d > 0.0)
            .map(|(_, &r)| r)
            .sum();
        let mut at_least = 0usize;
        for mask in 0u32..(1 << n) {
            let w: f64 = (0..n).filter(|&i| mask & (1 << i) != 0).map(|i| ranks[i]).sum();
            if w >= observed - 1e-12 {
                at_least += 1;
            }
        }
        at_least as f64 / (1u64 << n) as f64
    }

    #[test]
    fn exact_matches_enumeration_oracle() {
        let fixtures: Vec<Vec<f64>> = vec![
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            vec![1.0, -2.0, 3.0, -4.0, 5.0, 6.0, 7.0],
            vec![0.5, 0.5, -0.5, 1.5, 2.5, -2.5, 3.0, 3.0], // ties
            vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            vec![-1.0, 2.0, -3.0, 4.0, -5.0, 6.0, -7.0, 8.0, 9.0, -10.0, 11.0, 0.0],
        ];
        for diffs in fixtures {
            let got = wilcoxon_signed_rank_one_sided(&diffs);
            let expected = wilcoxon_enumeration_oracle(&diffs);
            assert!(
                (got - expected).abs() < 1e-12,
                "diffs {diffs:?}: got {got}, oracle {expected}"
            );
        }
    }

    #[test]
    fn all_positive_attains_smallest_p() {
        // strictly positive on all n: p = 2^-n
        let diffs: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        let p = wilcoxon_signed_rank_one_sided(&diffs);
        assert!((p - 2f64.powi(-20)).abs() < 1e-15);
    }

    #[test]
    fn all_zero_differences_is_p_one() {
        assert_eq!(wilcoxon_signed_rank_one_sided(&[0.0; 10]), 1.0);
    }

    #[test]
    fn approximation_close_to_exact_at_boundary() {
        let diffs: Vec<f64> = (1..=25)
            .map(|i| if i % 3 == 0 { -(i as f64) } else { i as f64 })
            .collect();
        let exact = exact_upper_tail(
            &average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>()),
            diffs
                .iter()
                .zip(average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>()).iter())
                .filter(|(&d, _)| d > 0.0)
                .map(|(_, &r)| r)
                .sum(),
        );
        let approx = normal_upper_tail(
            &average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>()),
            diffs
                .iter()
                .zip(average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>()).iter())
                .filter(|(&d, _)| d > 0.0)
                .map(|(_, &r)| r)
                .sum(),
            diffs.len(),
        );
        assert!((exact - approx).abs() < 0.01, "exact {exact} vs approx {approx}");
    }

    #[test]
    fn holm_step_down_arithmetic() {
        // 0.01*3, 0.02*2, 0.04*1 all <= 0.05 -> all rejected
        assert_eq!(holm_decisions(&[0.01, 0.02, 0.04], 0.05), vec![true; 3]);
        // 0.03*2 > 0.05 stops the procedure after the first
        assert_eq!(
            holm_decisions(&[0.01, 0.03, 0.04], 0.05),
            vec![true, false, false]
        );
        assert_eq!(holm_decisions(&[0.9, 0.8], 0.05), vec![false, false]);
    }

    #[test]
    fn holm_is_monotone() {
        let ps = [0.001, 0.04, 0.012, 0.3, 0.0004, 0.02];
        let rej = holm_decisions(&ps, 0.05);
        for i in 0..ps.len() {
            for j in 0..ps.len() {
                if rej[i] && ps[j] < ps[i] {
                    assert!(rej[j], "p={} rejected but smaller p={} not", ps[i], ps[j]);
                }
            }
        }
    }

    #[test]
    fn t_two_sided_symmetry() {
        let p = t_two_sided_p(2.0, 10.0).unwrap();
        let q = t_two_sided_p(-2.0, 10.0).unwrap();
        assert!((p - q).abs() < 1e-15);
        assert!(p > 0.0 && p < 0.1);
        assert!((t_two_sided_p(0.0, 5.0).unwrap() - 1.0).abs() < 1e-12);
    }
}
