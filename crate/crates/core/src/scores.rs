//! Doubly robust scores and the inference applied to their means.
//!
//! The per-arm score combines the outcome regression with an inverse
//! propensity correction on the realized arm:
//!
//!   Gamma_{i,w} = mu_hat(w, x_i) + D_i(w) * (y_i - mu_hat(w, x_i)) / e_hat_w(x_i)
//!
//! Contrast scores are differences of per-arm scores. The treated-only
//! contrast reweights the comparison arm by the propensity ratio instead.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nuisance::NuisanceEstimates;
use crate::stats::{normal_two_sided_p, pairwise_sum};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// Per-arm doubly robust scores, one column per arm.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    pub gamma: Array2<f64>,
}

fn check_alignment(ds: &Dataset, nu: &NuisanceEstimates) -> Result<()> {
    if nu.mu_hat.nrows() != ds.n() || nu.e_hat.nrows() != ds.n() {
        return Err(Error::invalid_data(
            "nuisance estimates do not match dataset rows",
        ));
    }
    if nu.mu_hat.ncols() != ds.num_arms || nu.e_hat.ncols() != ds.num_arms {
        return Err(Error::invalid_data(
            "nuisance estimates do not match number of arms",
        ));
    }
    Ok(())
}

/// Average-potential-outcome scores for every arm.
pub fn apo_scores(ds: &Dataset, nu: &NuisanceEstimates) -> Result<ScoreSet> {
    check_alignment(ds, nu)?;
    let n = ds.n();
    let arms = ds.num_arms;
    let mut gamma = Array2::<f64>::zeros((n, arms));
    for i in 0..n {
        let wi = ds.w[i];
        for arm in 0..arms {
            let mu = nu.mu_hat[[i, arm]];
            let mut score = mu;
            if wi == arm {
                score += (ds.y[i] - mu) / nu.e_hat[[i, arm]];
            }
            gamma[[i, arm]] = score;
        }
    }
    Ok(ScoreSet { gamma })
}

/// Scores for the average effect of `arm` versus `versus`.
#[derive(Debug, Clone)]
pub struct ContrastScores {
    pub arm: usize,
    pub versus: usize,
    pub delta: Array1<f64>,
}

pub fn ate_scores(scores: &ScoreSet, arm: usize, versus: usize) -> Result<ContrastScores> {
    let arms = scores.gamma.ncols();
    if arm >= arms || versus >= arms {
        return Err(Error::invalid_param(format!(
            "contrast ({arm}, {versus}) outside 0..{arms}"
        )));
    }
    let delta = &scores.gamma.column(arm) - &scores.gamma.column(versus);
    Ok(ContrastScores { arm, versus, delta })
}

/// Scores for the average effect of `arm` versus `versus` among those who
/// received `arm`.
#[derive(Debug, Clone)]
pub struct AtetScores {
    pub arm: usize,
    pub versus: usize,
    pub theta: Array1<f64>,
}

pub fn atet_scores(
    ds: &Dataset,
    nu: &NuisanceEstimates,
    arm: usize,
    versus: usize,
) -> Result<AtetScores> {
    check_alignment(ds, nu)?;
    if arm >= ds.num_arms || versus >= ds.num_arms {
        return Err(Error::invalid_param(format!(
            "contrast ({arm}, {versus}) outside 0..{}",
            ds.num_arms
        )));
    }
    let n = ds.n();
    let p_w = ds.arm_counts[arm] as f64 / n as f64;
    let mut theta = Array1::<f64>::zeros(n);
    for i in 0..n {
        let resid = ds.y[i] - nu.mu_hat[[i, versus]];
        let mut v = 0.0;
        if ds.w[i] == arm {
            v += resid / p_w;
        }
        if ds.w[i] == versus {
            v -= nu.e_hat[[i, arm]] * resid / (p_w * nu.e_hat[[i, versus]]);
        }
        theta[i] = v;
    }
    Ok(AtetScores { arm, versus, theta })
}

/// Sample mean of a score vector with asymptotic inference. The variance
/// uses the 1/N convention and the p-value a standard normal reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub point: f64,
    pub se: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub n: usize,
}

pub fn mean_effect(scores: &[f64]) -> Result<EffectEstimate> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::invalid_data("cannot average zero scores"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_data("non-finite score"));
    }
    let point = pairwise_sum(scores) / n as f64;
    let sq: Vec<f64> = scores.iter().map(|&s| (s - point) * (s - point)).collect();
    let variance = pairwise_sum(&sq) / n as f64;
    let se = (variance / n as f64).sqrt();
    let (t_stat, p_value) = if se > 0.0 {
        let t = point / se;
        (t, normal_two_sided_p(t))
    } else if point == 0.0 {
        (0.0, 1.0)
    } else {
        (f64::INFINITY * point.signum(), 0.0)
    };
    Ok(EffectEstimate {
        point,
        se,
        t_stat,
        p_value,
        n,
    })
}

/// One row of a reportable estimate table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectRow {
    pub estimand: String,
    /// Original treatment labels involved, e.g. [w] for an APO or
    /// [w, versus] for a contrast.
    pub arms: Vec<i64>,
    pub point: f64,
    pub se: f64,
    pub t: f64,
    pub p: f64,
    pub n: usize,
}

impl EffectRow {
    pub fn new(estimand: impl Into<String>, arms: Vec<i64>, est: &EffectEstimate) -> EffectRow {
        EffectRow {
            estimand: estimand.into(),
            arms,
            point: est.point,
            se: est.se,
            t: est.t_stat,
            p: est.p_value,
            n: est.n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array1, Array2};

    /// Population with two covariate cells (x = 0 or 1), two arms, and
    /// exact cell frequencies, so score means can be enumerated by hand.
    ///
    /// p(x=0) = 1/2; e_1(0) = 0.3, e_1(1) = 0.6.
    /// mu(w, x): mu(0,0)=1, mu(0,1)=2, mu(1,0)=4, mu(1,1)=0.
    /// Within each (x, w) cell outcomes are mu +/- 1 in equal halves, so
    /// cell residual means are exactly zero.
    fn enumerated_population() -> (Dataset, NuisanceEstimates) {
        let e1 = [0.3, 0.6];
        let mu = [[1.0, 2.0], [4.0, 0.0]]; // mu[w][x]
        let per_cell = 20usize; // scaled so every cell count is an even integer
        let mut y = Vec::new();
        let mut w = Vec::new();
        let mut xv = Vec::new();
        for (x, &e) in e1.iter().enumerate() {
            for arm in 0..2usize {
                let share = if arm == 1 { e } else { 1.0 - e };
                let count = (per_cell as f64 * 10.0 * share).round() as usize;
                for c in 0..count {
                    let nu = if c % 2 == 0 { 1.0 } else { -1.0 };
                    y.push(mu[arm][x] + nu);
                    w.push(arm as i64);
                    xv.push(x as f64);
                }
            }
        }
        let n = y.len();
        let x = Array2::from_shape_vec((n, 1), xv).unwrap();
        let ds =
            Dataset::with_z_from_x(Array1::from_vec(y), &w, x, vec!["x".into()], &[0]).unwrap();

        let mut mu_hat = Array2::<f64>::zeros((n, 2));
        let mut e_hat = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            let x = ds.x[[i, 0]] as usize;
            mu_hat[[i, 0]] = mu[0][x];
            mu_hat[[i, 1]] = mu[1][x];
            e_hat[[i, 1]] = e1[x];
            e_hat[[i, 0]] = 1.0 - e1[x];
        }
        let nu = NuisanceEstimates {
            mu_hat,
            e_hat,
            fold: vec![0; n],
            trimmed: vec![false; n],
        };
        (ds, nu)
    }

    #[test]
    fn apo_scores_average_to_enumerated_truth() {
        let (ds, nu) = enumerated_population();
        let scores = apo_scores(&ds, &nu).unwrap();
        // gamma_w = sum_x p(x) mu(w, x).
        let truth = [0.5 * (1.0 + 2.0), 0.5 * (4.0 + 0.0)];
        for arm in 0..2 {
            let est = mean_effect(&scores.gamma.column(arm).to_vec()).unwrap();
            assert_abs_diff_eq!(est.point, truth[arm], epsilon = 1e-10);
        }
    }

    #[test]
    fn wrong_outcome_model_still_averages_to_truth() {
        // With true propensities and exact cell frequencies, replacing the
        // outcome model by zero leaves the score means untouched.
        let (ds, nu) = enumerated_population();
        let zeroed = NuisanceEstimates {
            mu_hat: Array2::zeros((ds.n(), 2)),
            ..nu
        };
        let scores = apo_scores(&ds, &zeroed).unwrap();
        let truth = [1.5, 2.0];
        for arm in 0..2 {
            let est = mean_effect(&scores.gamma.column(arm).to_vec()).unwrap();
            assert_abs_diff_eq!(est.point, truth[arm], epsilon = 1e-10);
        }
    }

    #[test]
    fn ate_scores_are_antisymmetric() {
        let (ds, nu) = enumerated_population();
        let scores = apo_scores(&ds, &nu).unwrap();
        let ab = ate_scores(&scores, 1, 0).unwrap();
        let ba = ate_scores(&scores, 0, 1).unwrap();
        for i in 0..ds.n() {
            assert_eq!(ab.delta[i], -ba.delta[i]);
        }
        let est = mean_effect(&ab.delta.to_vec()).unwrap();
        assert_abs_diff_eq!(est.point, 0.5, epsilon = 1e-10);
    }

    #[test]
    fn atet_scores_average_to_enumerated_truth() {
        let (ds, nu) = enumerated_population();
        let theta = atet_scores(&ds, &nu, 1, 0).unwrap();
        // Among the treated: p(x|w=1) proportional to p(x) e_1(x), so
        // p(0|1) = 0.3/0.9, p(1|1) = 0.6/0.9.
        // ATET = (0.3 * (4-1) + 0.6 * (0-2)) / 0.9.
        let truth = (0.3 * 3.0 + 0.6 * (-2.0)) / 0.9;
        let est = mean_effect(&theta.theta.to_vec()).unwrap();
        assert_abs_diff_eq!(est.point, truth, epsilon = 1e-10);
    }

    #[test]
    fn atet_of_arm_against_itself_is_zero() {
        let (ds, nu) = enumerated_population();
        let theta = atet_scores(&ds, &nu, 1, 1).unwrap();
        for i in 0..ds.n() {
            assert_abs_diff_eq!(theta.theta[i], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn mean_effect_matches_hand_computation() {
        let est = mean_effect(&[1.0, 2.0, 3.0]).unwrap();
        assert_abs_diff_eq!(est.point, 2.0, epsilon = 1e-12);
        // Variance (1/N convention) = 2/3; se = sqrt(2/9).
        assert_abs_diff_eq!(est.se, (2.0f64 / 9.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(est.t_stat, 2.0 / (2.0f64 / 9.0).sqrt(), epsilon = 1e-12);
        assert_eq!(est.n, 3);
    }

    #[test]
    fn constant_scores_have_zero_se() {
        let est = mean_effect(&[2.5; 40]).unwrap();
        assert_eq!(est.point, 2.5);
        assert_eq!(est.se, 0.0);
        assert_eq!(est.p_value, 0.0);

        let zero = mean_effect(&[0.0; 40]).unwrap();
        assert_eq!(zero.t_stat, 0.0);
        assert_eq!(zero.p_value, 1.0);
    }

    #[test]
    fn score_shapes_are_validated() {
        let (ds, nu) = enumerated_population();
        let short = NuisanceEstimates {
            mu_hat: Array2::zeros((3, 2)),
            e_hat: Array2::from_elem((3, 2), 0.5),
            fold: vec![0; 3],
            trimmed: vec![false; 3],
        };
        assert!(apo_scores(&ds, &short).is_err());
        let scores = apo_scores(&ds, &nu).unwrap();
        assert!(ate_scores(&scores, 0, 5).is_err());
    }
}
