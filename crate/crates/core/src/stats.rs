//! Paired significance tests for comparing two models on the same users.
//!
//! * Wilcoxon signed-rank for per-user metric values (NDCG, recall):
//!   zero differences are dropped, tied absolute differences share averaged
//!   ranks, and the two-sided p-value is exact (full null distribution) up
//!   to `n = 25` pairs, switching to the tie-corrected normal approximation
//!   with continuity correction beyond that.
//! * McNemar for per-user correctness of two classifiers: exact binomial on
//!   the discordant pairs when there are fewer than 25, otherwise the
//!   continuity-corrected chi-squared statistic with 1 degree of freedom.
//!
//! The normal and chi-squared tail probabilities come from a rational
//! approximation of `erfc` accurate to ~1e-7, far below any alpha in use.

use crate::error::{Error, Result};

/// Largest number of nonzero differences for which the Wilcoxon null
/// distribution is enumerated exactly.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// Exact binomial McNemar is used while `discordant < MCNEMAR_EXACT_MIN_DISCORDANT`.
pub const MCNEMAR_EXACT_MIN_DISCORDANT: u64 = 25;

/// Which p-value computation to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TestMethod {
    /// Exact below the size threshold, approximation above it.
    Auto,
    Exact,
    Approximate,
}

/// Outcome of a Wilcoxon signed-rank test.
#[derive(Clone, Debug)]
pub struct WilcoxonResult {
    /// Number of nonzero differences actually tested.
    pub n: usize,
    /// Sum of ranks of the positive differences (`W+`).
    pub statistic: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    /// `p_value < alpha`.
    pub significant: bool,
    /// Whether the exact enumeration (rather than the normal path) ran.
    pub exact: bool,
}

/// Outcome of a McNemar test.
#[derive(Clone, Debug)]
pub struct McnemarResult {
    /// Users the first model got right and the second got wrong.
    pub a_only: u64,
    /// Users the second model got right and the first got wrong.
    pub b_only: u64,
    /// Continuity-corrected chi-squared statistic
    /// `(max(|a_only - b_only| - 1, 0))^2 / (a_only + b_only)`.
    pub statistic: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    /// `p_value < alpha`.
    pub significant: bool,
    /// Whether the exact binomial (rather than chi-squared) path ran.
    pub exact: bool,
}

fn validate_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Contract(format!("alpha {alpha} outside (0, 1)")));
    }
    Ok(())
}

/// Wilcoxon signed-rank test on paired samples, choosing the exact or
/// approximate path automatically.
pub fn wilcoxon_signed_rank(xs: &[f64], ys: &[f64], alpha: f64) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_with(xs, ys, alpha, TestMethod::Auto)
}

/// Wilcoxon signed-rank test with an explicit method choice.
pub fn wilcoxon_signed_rank_with(
    xs: &[f64],
    ys: &[f64],
    alpha: f64,
    method: TestMethod,
) -> Result<WilcoxonResult> {
    validate_alpha(alpha)?;
    if xs.len() != ys.len() {
        return Err(Error::Contract(format!("paired samples differ in length: {} vs {}", xs.len(), ys.len())));
    }
    if xs.is_empty() {
        return Err(Error::Contract("wilcoxon needs at least one pair".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Domain { op: "wilcoxon_signed_rank", detail: "non-finite sample value".into() });
    }
    let diffs: Vec<f64> = xs.iter().zip(ys).map(|(&x, &y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        // All pairs tied: no evidence against the null in either direction.
        return Ok(WilcoxonResult { n, statistic: 0.0, p_value: 1.0, significant: false, exact: true });
    }
    let ranks = average_ranks(&diffs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| *r).sum();

    let use_exact = match method {
        TestMethod::Auto => n <= WILCOXON_EXACT_MAX_N,
        TestMethod::Exact => {
            if n > WILCOXON_EXACT_MAX_N {
                return Err(Error::Contract(format!(
                    "exact wilcoxon limited to n <= {WILCOXON_EXACT_MAX_N}, got {n}"
                )));
            }
            true
        }
        TestMethod::Approximate => false,
    };
    let p_value = if use_exact {
        wilcoxon_exact_p(&ranks, w_plus)
    } else {
        wilcoxon_normal_p(&ranks, w_plus)
    };
    Ok(WilcoxonResult { n, statistic: w_plus, p_value, significant: p_value < alpha, exact: use_exact })
}

/// Ranks of `|diffs|` in ascending order, averaging over ties.
fn average_ranks(diffs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&a, &b| diffs[a].abs().partial_cmp(&diffs[b].abs()).expect("finite"));
    let mut ranks = vec![0.0; diffs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // Positions i..=j (0-based) share the average of ranks i+1..=j+1.
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Exact two-sided p-value: enumerate the null distribution of `W+` over all
/// `2^n` sign assignments by dynamic programming on doubled ranks (averaged
/// ranks are multiples of 1/2, so doubling makes them integers).
fn wilcoxon_exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    // counts[s] = number of subsets of ranks with doubled-sum s.
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let w2 = (2.0 * w_plus).round() as usize;
    let all = 2f64.powi(ranks.len() as i32);
    let low: u64 = counts[..=w2].iter().sum();
    let high: u64 = counts[w2..].iter().sum();
    let tail = (low as f64 / all).min(high as f64 / all);
    (2.0 * tail).min(1.0)
}

/// Normal approximation with tie correction and continuity correction.
fn wilcoxon_normal_p(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
    // Subtract sum(t^3 - t)/48 over groups of tied ranks.
    let mut sorted = ranks.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        var -= (t * t * t - t) / 48.0;
        i = j + 1;
    }
    if var <= 0.0 {
        return 1.0;
    }
    let delta = w_plus - mean;
    // Continuity correction: shrink the statistic half a step toward the mean.
    let corrected = if delta > 0.0 { delta - 0.5 } else if delta < 0.0 { delta + 0.5 } else { 0.0 };
    let z = corrected / var.sqrt();
    (2.0 * normal_sf(z.abs())).min(1.0)
}

/// McNemar test on per-user correctness of two models (auto method).
pub fn mcnemar(a_correct: &[bool], b_correct: &[bool], alpha: f64) -> Result<McnemarResult> {
    mcnemar_with(a_correct, b_correct, alpha, TestMethod::Auto)
}

/// McNemar test with an explicit method choice.
pub fn mcnemar_with(
    a_correct: &[bool],
    b_correct: &[bool],
    alpha: f64,
    method: TestMethod,
) -> Result<McnemarResult> {
    validate_alpha(alpha)?;
    if a_correct.len() != b_correct.len() {
        return Err(Error::Contract(format!(
            "paired samples differ in length: {} vs {}",
            a_correct.len(),
            b_correct.len()
        )));
    }
    if a_correct.is_empty() {
        return Err(Error::Contract("mcnemar needs at least one pair".into()));
    }
    let mut a_only = 0u64;
    let mut b_only = 0u64;
    for (&a, &b) in a_correct.iter().zip(b_correct) {
        match (a, b) {
            (true, false) => a_only += 1,
            (false, true) => b_only += 1,
            _ => {}
        }
    }
    let discordant = a_only + b_only;
    let statistic = if discordant == 0 {
        0.0
    } else {
        let diff = (a_only as f64 - b_only as f64).abs();
        (diff - 1.0).max(0.0).powi(2) / discordant as f64
    };
    if discordant == 0 {
        // The models never disagree: no evidence, by either method.
        return Ok(McnemarResult { a_only, b_only, statistic, p_value: 1.0, significant: false, exact: true });
    }
    let use_exact = match method {
        TestMethod::Auto => discordant < MCNEMAR_EXACT_MIN_DISCORDANT,
        TestMethod::Exact => true,
        TestMethod::Approximate => false,
    };
    let p_value = if use_exact {
        // Two-sided exact binomial on the discordant pairs, p = 1/2.
        let m = a_only.min(b_only);
        (2.0 * binomial_cdf_half(discordant, m)).min(1.0)
    } else {
        chi2_sf_1df(statistic)
    };
    Ok(McnemarResult { a_only, b_only, statistic, p_value, significant: p_value < alpha, exact: use_exact })
}

/// `P(X <= m)` for `X ~ Binomial(n, 1/2)`, via incremental binomial
/// coefficients (exact in f64 for the n used here).
fn binomial_cdf_half(n: u64, m: u64) -> f64 {
    let scale = 0.5f64.powi(n as i32);
    let mut coeff = 1.0; // C(n, 0)
    let mut sum = coeff;
    for i in 1..=m {
        coeff = coeff * (n - i + 1) as f64 / i as f64;
        sum += coeff;
    }
    sum * scale
}

/// Complementary error function, Numerical Recipes rational approximation
/// (absolute error < 1.2e-7 everywhere).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807
                            + t * (-1.13520398
                                + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277))))))));
    let ans = t * poly.exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// Standard normal survival function `P(Z > z)`.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Chi-squared (1 dof) survival function `P(X > x)`.
pub fn chi2_sf_1df(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    erfc((x / 2.0).sqrt())
}
