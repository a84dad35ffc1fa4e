//! Wilcoxon signed-rank test on paired samples.
//!
//! Zero differences are dropped. Tied magnitudes get average ranks. The
//! p-value is exact (enumerated over all sign assignments by dynamic
//! programming on doubled ranks) for up to 25 non-zero pairs, and a normal
//! approximation with tie correction beyond that.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::MetricsError;

/// Largest sample size that uses the exact null distribution.
pub const EXACT_LIMIT: usize = 25;

/// Fewest non-zero pairs accepted.
pub const MIN_PAIRS: usize = 6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    #[default]
    TwoSided,
    /// `x` tends to exceed `y`.
    Greater,
    /// `x` tends to fall below `y`.
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Non-zero differences used.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W+, W-)`.
    pub w: f64,
    pub p_value: f64,
    pub method: PValueMethod,
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Signed-rank test of `x - y`.
pub fn wilcoxon_signed_rank(
    x: &[f64],
    y: &[f64],
    alternative: Alternative,
) -> Result<WilcoxonResult, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let nonzero: Vec<f64> = diffs.into_iter().filter(|&d| d != 0.0).collect();
    if nonzero.is_empty() {
        return Err(MetricsError::Degenerate);
    }
    let n = nonzero.len();
    if n < MIN_PAIRS {
        return Err(MetricsError::InsufficientPairs(n));
    }
    let magnitudes: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&magnitudes);
    let w_plus: f64 = ranks.iter().zip(&nonzero).filter(|(_, &d)| d > 0.0).map(|(r, _)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;

    let (p_value, method) = if n <= EXACT_LIMIT {
        (exact_p(&ranks, w_plus, alternative), PValueMethod::Exact)
    } else {
        (normal_p(&ranks, w_plus, alternative), PValueMethod::Normal)
    };
    Ok(WilcoxonResult { n, w_plus, w_minus, w: w_plus.min(w_minus), p_value, method })
}

fn exact_p(ranks: &[f64], w_plus: f64, alternative: Alternative) -> f64 {
    // Average ranks are multiples of 1/2, so doubled ranks are integers.
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let all = 2f64.powi(ranks.len() as i32);
    let observed = (w_plus * 2.0).round() as usize;
    let at_most = counts[..=observed].iter().sum::<u64>() as f64 / all;
    let at_least = counts[observed..].iter().sum::<u64>() as f64 / all;
    match alternative {
        Alternative::TwoSided => (2.0 * at_most.min(at_least)).min(1.0),
        Alternative::Greater => at_least,
        Alternative::Less => at_most,
    }
}

fn normal_p(ranks: &[f64], w_plus: f64, alternative: Alternative) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    let z = (w_plus - mean) / var.sqrt();
    let normal = Normal::standard();
    match alternative {
        Alternative::TwoSided => (2.0 * normal.sf(z.abs())).min(1.0),
        Alternative::Greater => normal.sf(z),
        Alternative::Less => normal.cdf(z),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Enumerate every sign assignment of the observed ranks.
    fn oracle(x: &[f64], y: &[f64], alt: Alternative) -> (f64, f64) {
        let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|&v| v != 0.0).collect();
        let mags: Vec<f64> = d.iter().map(|v| v.abs()).collect();
        let ranks = average_ranks(&mags);
        let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, &v)| v > 0.0).map(|(r, _)| r).sum();
        let n = d.len();
        let (mut le, mut ge) = (0u64, 0u64);
        for mask in 0u32..(1 << n) {
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if s <= w_plus + 1e-9 {
                le += 1;
            }
            if s >= w_plus - 1e-9 {
                ge += 1;
            }
        }
        let total = (1u64 << n) as f64;
        let p = match alt {
            Alternative::TwoSided => (2.0 * (le.min(ge) as f64) / total).min(1.0),
            Alternative::Greater => ge as f64 / total,
            Alternative::Less => le as f64 / total,
        };
        (w_plus, p)
    }

    #[test]
    fn all_shifted_by_one() {
        let x: Vec<f64> = (0..8).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 1.0).collect();
        let r = wilcoxon_signed_rank(&x, &y, Alternative::TwoSided).unwrap();
        assert_eq!(r.w, 0.0);
        assert!((r.p_value - 2.0 / 256.0).abs() < 1e-12);
        assert!((r.p_value - 0.0078).abs() < 1e-4);
    }

    #[test]
    fn antisymmetric_differences_give_p_one() {
        let x = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let r = wilcoxon_signed_rank(&x, &[0.0; 6], Alternative::TwoSided).unwrap();
        assert_eq!(r.w_plus, r.w_minus);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn degenerate_and_small_inputs() {
        assert_eq!(wilcoxon_signed_rank(&[1.0; 7], &[1.0; 7], Alternative::TwoSided), Err(MetricsError::Degenerate));
        assert_eq!(
            wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 0.0, 0.0, 0.0], &[0.0; 6], Alternative::TwoSided),
            Err(MetricsError::InsufficientPairs(3))
        );
        assert!(wilcoxon_signed_rank(&[1.0], &[1.0, 2.0], Alternative::TwoSided).is_err());
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn exact_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let n = rng.random_range(6..=12);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
            for alt in [Alternative::TwoSided, Alternative::Greater, Alternative::Less] {
                match wilcoxon_signed_rank(&x, &y, alt) {
                    Ok(r) => {
                        let (w_plus, p) = oracle(&x, &y, alt);
                        assert_eq!(r.w_plus, w_plus);
                        assert!((r.p_value - p).abs() < 1e-12);
                    }
                    Err(MetricsError::InsufficientPairs(_) | MetricsError::Degenerate) => {}
                    Err(e) => panic!("{e}"),
                }
            }
        }
    }

    #[test]
    fn normal_approximation_tracks_exact_near_the_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..2.0)).collect();
        let ranks = average_ranks(&d.iter().map(|v: &f64| v.abs()).collect::<Vec<_>>());
        let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, &v)| v > 0.0).map(|(r, _)| r).sum();
        let exact = exact_p(&ranks, w_plus, Alternative::TwoSided);
        let approx = normal_p(&ranks, w_plus, Alternative::TwoSided);
        assert!((exact - approx).abs() < 0.02, "{exact} vs {approx}");
        let big: Vec<f64> = (0..40).map(|i| i as f64 * 0.1 + 0.05).collect();
        let r = wilcoxon_signed_rank(&big, &[0.0; 40], Alternative::Greater).unwrap();
        assert_eq!(r.method, PValueMethod::Normal);
        assert!(r.p_value < 1e-6);
    }
}
