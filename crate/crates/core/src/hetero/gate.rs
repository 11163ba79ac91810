//! Group average treatment effects: regressions of the contrast scores on
//! moderators. Because the scores are orthogonalised, ordinary regression
//! inference applies to their conditional means.

use crate::error::{Error, Result};
use crate::hetero::bspline::BSplineBasis;
use crate::linalg::{hc1_covariance, invert_small, ols};
use crate::scores::ContrastScores;
use crate::stats::{
    chi_squared_sf, mean, normal_two_sided_p, pairwise_sum, quantile_sorted, sample_sd,
};
use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// OLS of the contrast scores on an intercept plus moderators, with
/// heteroscedasticity-robust inference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateTable {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub hc_se: Vec<f64>,
    pub t_stats: Vec<f64>,
    pub p_values: Vec<f64>,
    /// Robust Wald statistic over the non-intercept block divided by the
    /// number of restrictions; 0 with p-value 1 when there are none.
    pub joint_f: f64,
    pub joint_p: f64,
    pub n: usize,
}

pub fn gate_ols(
    delta: &ContrastScores,
    z: ArrayView2<f64>,
    z_names: &[String],
) -> Result<GateTable> {
    let n = delta.delta.len();
    let q = z.ncols();
    if z.nrows() != n {
        return Err(Error::invalid_data(format!(
            "moderator matrix has {} rows for {n} scores",
            z.nrows()
        )));
    }
    if z_names.len() != q {
        return Err(Error::invalid_data("moderator names do not match columns"));
    }
    if n <= q + 1 {
        return Err(Error::invalid_data(format!(
            "{n} observations cannot support {q} moderators plus intercept"
        )));
    }

    let mut design = Array2::<f64>::ones((n, q + 1));
    design.slice_mut(ndarray::s![.., 1..]).assign(&z);
    let mut names = vec!["intercept".to_string()];
    names.extend_from_slice(z_names);

    let mut fit = ols(design.view(), delta.delta.view(), &names)?;
    if q == 0 {
        // The 1x1 normal equations reduce to the sample mean; evaluating
        // them with the same pairwise sum as mean_effect keeps the two
        // estimates identical to the last bit.
        let m = mean(delta.delta.as_slice().expect("contiguous scores"));
        fit.beta[0] = m;
        fit.fitted.fill(m);
        fit.residuals = &delta.delta - m;
    }
    let k = q + 1;

    // A numerically perfect fit has a zero sandwich covariance; computing it
    // from rounding-noise residuals would produce garbage Wald statistics.
    let y_scale = delta.delta.iter().fold(1.0f64, |m, &v| m.max(v.abs()));
    let perfect = fit.residuals.iter().all(|r| r.abs() <= 1e-10 * y_scale);
    let cov = if perfect {
        Array2::zeros((k, k))
    } else {
        hc1_covariance(design.view(), &fit)
    };
    let negligible = |b: f64| b.abs() <= 1e-8 * y_scale;

    let mut hc_se = Vec::with_capacity(k);
    let mut t_stats = Vec::with_capacity(k);
    let mut p_values = Vec::with_capacity(k);
    for j in 0..k {
        let se = cov[[j, j]].max(0.0).sqrt();
        let (t, p) = if se > 0.0 {
            let t = fit.beta[j] / se;
            (t, normal_two_sided_p(t))
        } else if negligible(fit.beta[j]) {
            (0.0, 1.0)
        } else {
            (f64::INFINITY * fit.beta[j].signum(), 0.0)
        };
        hc_se.push(se);
        t_stats.push(t);
        p_values.push(p);
    }

    let (joint_f, joint_p) = if q == 0 {
        (0.0, 1.0)
    } else if perfect {
        if (1..k).all(|j| negligible(fit.beta[j])) {
            (0.0, 1.0)
        } else {
            (f64::INFINITY, 0.0)
        }
    } else {
        let b = Array1::from_iter((1..k).map(|j| fit.beta[j]));
        let sub = cov.slice(ndarray::s![1.., 1..]).to_owned();
        let sub_inv = invert_small(&sub)?;
        let wald = b.dot(&sub_inv.dot(&b)).max(0.0);
        (wald / q as f64, chi_squared_sf(wald, q as f64))
    };

    Ok(GateTable {
        names,
        coefficients: fit.beta.to_vec(),
        hc_se,
        t_stats,
        p_values,
        joint_f,
        joint_p,
        n,
    })
}

/// How a fitted effect curve was produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum CurveMethod {
    Kernel {
        bandwidth: f64,
    },
    Series {
        degree: usize,
        interior_knots: usize,
    },
}

/// Effect curve in one moderator, evaluated on a grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveEstimate {
    pub grid: Vec<f64>,
    pub tau_hat: Vec<f64>,
    pub se: Vec<f64>,
    pub method: CurveMethod,
}

fn check_curve_inputs(delta: &ContrastScores, z: &[f64], grid: &[f64]) -> Result<()> {
    let n = delta.delta.len();
    if z.len() != n {
        return Err(Error::invalid_data(format!(
            "moderator has {} entries for {n} scores",
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_data("non-finite moderator value"));
    }
    let lo = z.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(lo < hi) {
        return Err(Error::invalid_data(
            "moderator is constant; no curve to estimate",
        ));
    }
    if grid.is_empty() {
        return Err(Error::invalid_param("empty evaluation grid"));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid_param("grid must be strictly increasing"));
    }
    if grid[0] < lo || *grid.last().unwrap() > hi {
        return Err(Error::invalid_param(format!(
            "grid [{}, {}] leaves the observed moderator range [{lo}, {hi}]",
            grid[0],
            grid.last().unwrap()
        )));
    }
    Ok(())
}

/// Equally spaced grid over the observed moderator range.
pub fn default_grid(z: &[f64], points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::invalid_param("grid needs at least 2 points"));
    }
    let lo = z.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(lo < hi) {
        return Err(Error::invalid_data(
            "moderator is constant; no curve to estimate",
        ));
    }
    Ok((0..points)
        .map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64)
        .collect())
}

fn gaussian(u: f64) -> f64 {
    (-0.5 * u * u).exp()
}

/// Rule-of-thumb scale for the bandwidth search: 1.06 min(sd, IQR/1.34) n^{-1/5}.
fn silverman_bandwidth(z: &[f64]) -> f64 {
    let sd = sample_sd(z);
    let mut sorted = z.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let mut scale = sd.min(iqr / 1.34);
    if !(scale > 0.0) {
        scale = sd;
    }
    1.06 * scale * (z.len() as f64).powf(-0.2)
}

/// Leave-one-out CV of the local mean over a 50-point log-spaced bandwidth
/// grid spanning [0.05, 5] times the rule-of-thumb scale.
fn cv_bandwidth(delta: &[f64], z: &[f64]) -> f64 {
    let n = z.len();
    let h0 = silverman_bandwidth(z);
    let candidates: Vec<f64> = (0..50)
        .map(|k| h0 * 0.05 * (100.0f64).powf(k as f64 / 49.0))
        .collect();
    let criteria: Vec<f64> = candidates
        .par_iter()
        .map(|&h| {
            let mut sse = 0.0;
            for i in 0..n {
                let mut num = 0.0;
                let mut den = 0.0;
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let k = gaussian((z[j] - z[i]) / h);
                    num += k * delta[j];
                    den += k;
                }
                if den <= 0.0 {
                    return f64::INFINITY;
                }
                let err = delta[i] - num / den;
                sse += err * err;
            }
            sse
        })
        .collect();
    let mut best = 0;
    for k in 1..candidates.len() {
        if criteria[k] < criteria[best] {
            best = k;
        }
    }
    candidates[best]
}

/// Nadaraya-Watson curve with a Gaussian kernel; the bandwidth is 0.9 times
/// the leave-one-out CV optimum.
pub fn gate_kernel(delta: &ContrastScores, z: &[f64], grid: &[f64]) -> Result<CurveEstimate> {
    check_curve_inputs(delta, z, grid)?;
    let scores = delta.delta.as_slice().expect("contiguous scores");
    let bandwidth = 0.9 * cv_bandwidth(scores, z);
    gate_kernel_with_bandwidth(delta, z, grid, bandwidth)
}

/// Same estimator with the bandwidth fixed by the caller.
pub fn gate_kernel_with_bandwidth(
    delta: &ContrastScores,
    z: &[f64],
    grid: &[f64],
    bandwidth: f64,
) -> Result<CurveEstimate> {
    check_curve_inputs(delta, z, grid)?;
    if !(bandwidth > 0.0) {
        return Err(Error::invalid_param(format!(
            "bandwidth {bandwidth} must be positive"
        )));
    }
    let scores = delta.delta.as_slice().expect("contiguous scores");
    let n = scores.len();
    let mut tau_hat = Vec::with_capacity(grid.len());
    let mut se = Vec::with_capacity(grid.len());
    let mut weights = vec![0.0; n];
    for &z0 in grid {
        for (j, wj) in weights.iter_mut().enumerate() {
            *wj = if bandwidth.is_infinite() {
                1.0
            } else {
                gaussian((z[j] - z0) / bandwidth)
            };
        }
        let total = pairwise_sum(&weights);
        if !(total > 0.0) {
            return Err(Error::invalid_data(format!(
                "kernel weights vanish at grid point {z0}; bandwidth too small"
            )));
        }
        let contrib: Vec<f64> = (0..n).map(|j| weights[j] / total * scores[j]).collect();
        let tau = pairwise_sum(&contrib);
        let var_terms: Vec<f64> = (0..n)
            .map(|j| {
                let a = weights[j] / total;
                let r = scores[j] - tau;
                a * a * r * r
            })
            .collect();
        tau_hat.push(tau);
        se.push(pairwise_sum(&var_terms).sqrt());
    }
    Ok(CurveEstimate {
        grid: grid.to_vec(),
        tau_hat,
        se,
        method: CurveMethod::Kernel { bandwidth },
    })
}

/// 10-fold CV (folds by index mod 10) over degree x interior-knot
/// candidates; returns the winner. Candidates whose design is singular on
/// some training split are skipped.
pub fn series_cv_select(
    delta: &ContrastScores,
    z: &[f64],
    candidates: &[(usize, usize)],
) -> Result<(usize, usize)> {
    let scores = delta.delta.as_slice().expect("contiguous scores");
    let n = scores.len();
    let folds = 10usize.min(n);
    let mut best: Option<((usize, usize), f64)> = None;
    for &(degree, knots) in candidates {
        let mut sse = 0.0;
        let mut ok = true;
        for fold in 0..folds {
            let train_idx: Vec<usize> = (0..n).filter(|i| i % folds != fold).collect();
            let test_idx: Vec<usize> = (0..n).filter(|i| i % folds == fold).collect();
            if test_idx.is_empty() {
                continue;
            }
            let z_train: Vec<f64> = train_idx.iter().map(|&i| z[i]).collect();
            let y_train: Vec<f64> = train_idx.iter().map(|&i| scores[i]).collect();
            let basis = match BSplineBasis::from_data(&z_train, knots, degree) {
                Ok(b) => b,
                Err(_) => {
                    ok = false;
                    break;
                }
            };
            let design = basis.design(&z_train);
            let fit = match ols(
                design.view(),
                Array1::from_vec(y_train).view(),
                &basis.column_names(),
            ) {
                Ok(f) => f,
                Err(_) => {
                    ok = false;
                    break;
                }
            };
            for &i in &test_idx {
                let row = basis.eval(z[i]);
                let pred: f64 = row.iter().zip(fit.beta.iter()).map(|(b, c)| b * c).sum();
                let err = scores[i] - pred;
                sse += err * err;
            }
        }
        if !ok {
            continue;
        }
        if best.map_or(true, |(_, s)| sse < s) {
            best = Some(((degree, knots), sse));
        }
    }
    best.map(|(c, _)| c)
        .ok_or_else(|| Error::invalid_data("every spline candidate produced a singular design"))
}

pub fn default_series_candidates() -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(20);
    for degree in [2usize, 3] {
        for knots in 1..=10usize {
            out.push((degree, knots));
        }
    }
    out
}

/// B-spline series regression of the contrast scores on one moderator, with
/// degree and knot count picked by 10-fold CV and pointwise SEs mapped
/// through the basis from the HC1 coefficient covariance.
pub fn gate_series(delta: &ContrastScores, z: &[f64], grid: &[f64]) -> Result<CurveEstimate> {
    check_curve_inputs(delta, z, grid)?;
    let (degree, knots) = series_cv_select(delta, z, &default_series_candidates())?;
    gate_series_with(delta, z, grid, degree, knots)
}

pub fn gate_series_with(
    delta: &ContrastScores,
    z: &[f64],
    grid: &[f64],
    degree: usize,
    interior_knots: usize,
) -> Result<CurveEstimate> {
    check_curve_inputs(delta, z, grid)?;
    let basis = BSplineBasis::from_data(z, interior_knots, degree)?;
    let design = basis.design(z);
    let fit = ols(design.view(), delta.delta.view(), &basis.column_names())?;
    let cov = hc1_covariance(design.view(), &fit);
    let mut tau_hat = Vec::with_capacity(grid.len());
    let mut se = Vec::with_capacity(grid.len());
    for &z0 in grid {
        let row = Array1::from_vec(basis.eval(z0));
        tau_hat.push(row.dot(&fit.beta));
        se.push(row.dot(&cov.dot(&row)).max(0.0).sqrt());
    }
    Ok(CurveEstimate {
        grid: grid.to_vec(),
        tau_hat,
        se,
        method: CurveMethod::Series {
            degree,
            interior_knots,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scores::mean_effect;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn contrast(values: Vec<f64>) -> ContrastScores {
        ContrastScores {
            arm: 1,
            versus: 0,
            delta: Array1::from_vec(values),
        }
    }

    #[test]
    fn intercept_only_matches_mean_inference() {
        let vals = vec![0.3, -1.2, 2.5, 0.0, 1.1, -0.7, 0.9, 1.4];
        let delta = contrast(vals.clone());
        let table = gate_ols(&delta, Array2::zeros((8, 0)).view(), &[]).unwrap();
        let base = mean_effect(&vals).unwrap();
        assert_eq!(
            table.coefficients[0], base.point,
            "intercept-only regression must reproduce the score mean bit for bit"
        );
        // HC1 divides by n-k instead of n, so the ratio of the two standard
        // errors is sqrt(n/(n-1)).
        let expected_se = base.se * (8.0f64 / 7.0).sqrt();
        assert_abs_diff_eq!(table.hc_se[0], expected_se, epsilon = 1e-12);
        assert_eq!(table.joint_f, 0.0);
        assert_eq!(table.joint_p, 1.0);
    }

    #[test]
    fn constant_scores_give_zero_slopes_and_zero_joint_f() {
        let n = 24;
        let delta = contrast(vec![1.7; n]);
        let mut z = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            z[[i, 0]] = i as f64;
            z[[i, 1]] = (i as f64).sin();
        }
        let table = gate_ols(&delta, z.view(), &["a".into(), "b".into()]).unwrap();
        assert_abs_diff_eq!(table.coefficients[0], 1.7, epsilon = 1e-10);
        assert_abs_diff_eq!(table.coefficients[1], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(table.coefficients[2], 0.0, epsilon = 1e-10);
        assert_eq!(table.joint_f, 0.0);
        assert_eq!(table.joint_p, 1.0);
        assert!(table.hc_se.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn binary_dummy_recovers_group_means() {
        let vals = vec![1.0, 3.0, 2.0, 6.0, 8.0, 10.0, 0.0, 4.0];
        let dummy = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0];
        let delta = contrast(vals.clone());
        let z = Array2::from_shape_vec((8, 1), dummy.to_vec()).unwrap();
        let table = gate_ols(&delta, z.view(), &["d".into()]).unwrap();
        let g0: f64 = [1.0, 3.0, 2.0, 0.0].iter().sum::<f64>() / 4.0;
        let g1: f64 = [6.0, 8.0, 10.0, 4.0].iter().sum::<f64>() / 4.0;
        assert_abs_diff_eq!(table.coefficients[0], g0, epsilon = 1e-10);
        assert_abs_diff_eq!(table.coefficients[1], g1 - g0, epsilon = 1e-10);
    }

    #[test]
    fn collinear_moderators_are_reported() {
        let delta = contrast((0..12).map(|i| i as f64).collect());
        let mut z = Array2::<f64>::zeros((12, 2));
        for i in 0..12 {
            z[[i, 0]] = i as f64;
            z[[i, 1]] = 2.0 * i as f64;
        }
        let err = gate_ols(&delta, z.view(), &["a".into(), "a_twice".into()]).unwrap_err();
        assert!(err.to_string().contains("a_twice"), "got: {err}");
    }

    #[test]
    fn infinite_bandwidth_gives_flat_curve_at_score_mean() {
        let vals: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        let z: Vec<f64> = (0..50).map(|i| i as f64 / 10.0).collect();
        let delta = contrast(vals.clone());
        let grid = default_grid(&z, 7).unwrap();
        let curve = gate_kernel_with_bandwidth(&delta, &z, &grid, f64::INFINITY).unwrap();
        let mean = mean_effect(&vals).unwrap().point;
        for t in &curve.tau_hat {
            assert_abs_diff_eq!(*t, mean, epsilon = 1e-10);
        }
    }

    #[test]
    fn kernel_is_local_around_an_isolated_point() {
        // One training point at z=0; everything else at least 10 bandwidths
        // away, so the curve at 0 matches that point's score.
        let mut z = vec![0.0];
        let mut vals = vec![5.5];
        for i in 0..30 {
            z.push(20.0 + i as f64);
            vals.push(-3.0);
        }
        let delta = contrast(vals);
        let curve = gate_kernel_with_bandwidth(&delta, &z, &[0.0, 20.0], 1.0).unwrap();
        assert_abs_diff_eq!(curve.tau_hat[0], 5.5, epsilon = 1e-6);
    }

    #[test]
    fn kernel_cv_tracks_a_linear_signal() {
        let n = 2000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vals: Vec<f64> = z
            .iter()
            .map(|&zi| zi + 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let delta = contrast(vals);
        let grid = vec![-0.5, 0.0, 0.5];
        let curve = gate_kernel(&delta, &z, &grid).unwrap();
        for (g, t) in grid.iter().zip(&curve.tau_hat) {
            assert!(
                (t - g).abs() < 0.1,
                "curve at {g} was {t}, off by {}",
                (t - g).abs()
            );
        }
        match curve.method {
            CurveMethod::Kernel { bandwidth } => assert!(bandwidth > 0.0),
            _ => panic!("expected kernel method"),
        }
    }

    #[test]
    fn constant_moderator_is_rejected() {
        let delta = contrast(vec![1.0, 2.0, 3.0]);
        let z = vec![4.0, 4.0, 4.0];
        assert!(gate_kernel_with_bandwidth(&delta, &z, &[4.0], 1.0).is_err());
    }

    #[test]
    fn grid_outside_observed_range_is_rejected() {
        let delta = contrast(vec![1.0, 2.0, 3.0, 4.0]);
        let z = vec![0.0, 1.0, 2.0, 3.0];
        assert!(gate_kernel_with_bandwidth(&delta, &z, &[2.0, 3.5], 1.0).is_err());
        assert!(gate_kernel_with_bandwidth(&delta, &z, &[1.0, 0.5], 1.0).is_err());
    }

    #[test]
    fn series_reproduces_constants_and_lines() {
        let n = 120;
        let z: Vec<f64> = (0..n).map(|i| i as f64 / 10.0).collect();
        let grid = default_grid(&z, 9).unwrap();

        let flat = contrast(vec![2.25; n]);
        let curve = gate_series_with(&flat, &z, &grid, 3, 4).unwrap();
        for t in &curve.tau_hat {
            assert_abs_diff_eq!(*t, 2.25, epsilon = 1e-8);
        }

        let line = contrast(z.iter().map(|&v| 3.0 * v - 1.0).collect());
        let curve = gate_series_with(&line, &z, &grid, 2, 5).unwrap();
        for (g, t) in grid.iter().zip(&curve.tau_hat) {
            assert_abs_diff_eq!(*t, 3.0 * g - 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn series_cv_prefers_fewer_knots_on_pure_noise() {
        let n = 200;
        let mut wins = 0;
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let vals: Vec<f64> = (0..n)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let delta = contrast(vals);
            let pick = series_cv_select(&delta, &z, &[(3, 1), (3, 10)]).unwrap();
            if pick == (3, 1) {
                wins += 1;
            }
        }
        assert!(wins >= 40, "1-knot model won only {wins}/50 times");
    }
}
