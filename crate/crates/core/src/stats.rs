//! Small numeric helpers shared across the crate.
//!
//! All reductions over floating point data go through [`pairwise_sum`] so
//! that results are independent of thread count and identical across runs.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// Pairwise (cascade) summation in index order. Deterministic for a given
/// input order and more accurate than naive left-to-right accumulation.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        let mut s = 0.0;
        for &x in v {
            s += x;
        }
        s
    } else {
        let mid = v.len() / 2;
        pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(v) / v.len() as f64
}

/// Sample standard deviation (n-1 divisor). Returns 0 for n < 2.
pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let ss: Vec<f64> = v.iter().map(|&x| (x - m) * (x - m)).collect();
    (pairwise_sum(&ss) / (v.len() - 1) as f64).sqrt()
}

/// Population variance (1/n divisor) about the sample mean.
pub fn population_variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let m = mean(v);
    let ss: Vec<f64> = v.iter().map(|&x| (x - m) * (x - m)).collect();
    pairwise_sum(&ss) / v.len() as f64
}

/// Linear-interpolation quantile on sorted input: index h = (n-1)p, value
/// interpolated between floor(h) and ceil(h). quantile(0.5) of {0.1..1.0}
/// is 0.55 under this convention.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    assert!((0.0..=1.0).contains(&p), "quantile level outside [0,1]");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = h - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Quantile of unsorted data; sorts a copy.
pub fn quantile(v: &[f64], p: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_unstable_by(|a, b| a.partial_cmp(b).expect("NaN in quantile input"));
    quantile_sorted(&s, p)
}

/// Two-sided p-value for a statistic with a standard normal reference.
pub fn normal_two_sided_p(t: f64) -> f64 {
    if !t.is_finite() {
        return if t.is_nan() { f64::NAN } else { 0.0 };
    }
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    2.0 * (1.0 - n.cdf(t.abs()))
}

/// Upper tail probability of a chi-squared distribution.
pub fn chi_squared_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let d = ChiSquared::new(df).expect("chi-squared dof must be positive");
    1.0 - d.cdf(x)
}

/// Derives an independent RNG seed from a base seed and a salt path.
/// SplitMix64 finalizer applied per component; used so that forests fitted
/// for different (arm, fold) cells never share streams.
pub fn mix_seed(base: u64, salt: &[u64]) -> u64 {
    let mut state = base;
    for &s in salt {
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(s);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pairwise_matches_naive_on_small_input() {
        let v: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert_abs_diff_eq!(pairwise_sum(&v), 5050.0, epsilon = 1e-12);
    }

    #[test]
    fn quantile_linear_interpolation_convention() {
        // Median of {0.1, 0.2, ..., 1.0} interpolates to 0.55.
        let v: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_abs_diff_eq!(quantile(&v, 0.5), 0.55, epsilon = 1e-12);
        assert_abs_diff_eq!(quantile(&v, 0.0), 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(quantile(&v, 1.0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sample_sd_uses_n_minus_one() {
        assert_abs_diff_eq!(sample_sd(&[1.0, 2.0, 3.0]), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn normal_p_value_at_zero_is_one() {
        assert_abs_diff_eq!(normal_two_sided_p(0.0), 1.0, epsilon = 1e-12);
        assert!(normal_two_sided_p(1.96) < 0.05001);
        assert!(normal_two_sided_p(1.96) > 0.04999);
    }

    #[test]
    fn mixed_seeds_differ_per_component() {
        let a = mix_seed(7, &[0, 1, 2]);
        let b = mix_seed(7, &[0, 1, 3]);
        let c = mix_seed(7, &[0, 1, 2]);
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
