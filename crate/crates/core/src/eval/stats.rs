//! Paired Wilcoxon signed-rank test and Student-t confidence intervals.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Largest number of non-zero differences handled by the exact distribution.
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WilcoxonMethod {
    /// Exact for `n <= 25`, normal approximation above.
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of the ranks of the positive differences `x - y`.
    pub w: f64,
    /// Two-sided p-value.
    pub p: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub method: WilcoxonMethod,
}

pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_with(x, y, WilcoxonMethod::Auto)
}

/// Average ranks (1-based) of `v`, ties sharing the mean of their positions.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn wilcoxon_signed_rank_with(x: &[f64], y: &[f64], method: WilcoxonMethod) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch { expected: x.len(), got: y.len() });
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    let n = d.len();
    if n < 5 {
        return Err(Error::TooFewPairs(n));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let method = match method {
        WilcoxonMethod::Auto if n <= EXACT_MAX_N => WilcoxonMethod::Exact,
        WilcoxonMethod::Auto => WilcoxonMethod::Normal,
        m => m,
    };
    let p = match method {
        WilcoxonMethod::Exact => exact_p(&ranks, w),
        _ => normal_p(&abs, &ranks, w),
    };
    Ok(WilcoxonResult { w, p, n, method })
}

/// Enumerates the null distribution of `W+` over all sign patterns. Ranks are
/// multiples of one half, so doubled ranks index an integer table.
fn exact_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let patterns = 2f64.powi(ranks.len() as i32);
    let w2 = (w * 2.0).round() as usize;
    let lower: f64 = counts[..=w2].iter().sum::<f64>() / patterns;
    let upper: f64 = counts[w2..].iter().sum::<f64>() / patterns;
    (2.0 * lower.min(upper)).min(1.0)
}

fn normal_p(abs: &[f64], ranks: &[f64], w: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = abs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let std = Normal::standard();
    (2.0 * (1.0 - std.cdf(z))).min(1.0)
}

/// Mean and 95% Student-t half-width.
pub fn confidence_interval(samples: &[f64]) -> Result<(f64, f64)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let t = StudentsT::new(0.0, 1.0, nf - 1.0).expect("positive degrees of freedom").inverse_cdf(0.975);
    Ok((mean, t * var.sqrt() / nf.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_all_negative() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y: Vec<f64> = x.iter().map(|v| v + 1.0).collect();
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert_eq!(r.w, 0.0);
        assert_eq!(r.p, 0.03125);
        let s = wilcoxon_signed_rank(&y, &x).unwrap();
        assert_eq!(s.w, 21.0);
        assert_eq!(s.p, r.p);
    }

    #[test]
    fn identical_inputs_have_no_pairs() {
        let x = [0.1, 0.2, 0.3, 0.4, 0.5];
        assert!(matches!(wilcoxon_signed_rank(&x, &x), Err(Error::TooFewPairs(0))));
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn ci_examples() {
        let (m, hw) = confidence_interval(&[0.4, 0.4, 0.4]).unwrap();
        assert!((m - 0.4).abs() < 1e-12 && hw.abs() < 1e-12);
        let (m, hw) = confidence_interval(&[0.0, 1.0]).unwrap();
        assert_eq!(m, 0.5);
        assert!((hw - 12.7062 * (0.5f64.sqrt() / 2f64.sqrt())).abs() < 1e-3);
        assert!(matches!(confidence_interval(&[1.0]), Err(Error::TooFewSamples(1))));
    }
}
