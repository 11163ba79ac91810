//! Individualised effect learners for one treatment pair.
//!
//! The DR-learner regresses the contrast scores on the confounders with the
//! honest forest. The NDR-learner reuses the same forest but rebuilds each
//! prediction from its smoother weights, normalising the inverse-propensity
//! residual terms per arm so no single observation can dominate.
//!
//! Cross-fitted variants split the sample into four folds. For each held-out
//! fold the remaining three rotate through the roles (propensity, outcome,
//! pseudo-outcome regression); the three resulting predictions are averaged.
//! Every estimate is therefore out-of-sample with respect to nuisances and
//! final stage alike.

use crate::data::{assign_folds, standardize, Dataset};
use crate::error::{Error, Result};
use crate::forest::{ForestModel, ForestParams, SmootherWeights};
use crate::nuisance::{gather_rows, NuisanceEstimates, PROPENSITY_FLOOR};
use crate::stats::{mix_seed, pairwise_sum, quantile};
use ndarray::{Array1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Learner {
    DrFull,
    DrCrossfit,
    NdrFull,
    NdrCrossfit,
}

impl Learner {
    pub fn as_str(&self) -> &'static str {
        match self {
            Learner::DrFull => "dr_full",
            Learner::DrCrossfit => "dr_crossfit",
            Learner::NdrFull => "ndr_full",
            Learner::NdrCrossfit => "ndr_crossfit",
        }
    }
}

/// Per-observation effect estimates for one pair of arms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IateResult {
    pub learner: Learner,
    pub arm: usize,
    pub versus: usize,
    pub tau_hat: Vec<f64>,
    /// Held-out fold that produced each estimate (crossfit variants only).
    pub fold: Option<Vec<usize>>,
    /// True where an arm had zero smoother mass at this prediction point and
    /// the unnormalised residual term (zero) was used instead.
    pub fallback: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct IateParams {
    pub outcome: ForestParams,
    pub propensity: ForestParams,
    pub final_stage: ForestParams,
    pub seed: u64,
}

impl Default for IateParams {
    fn default() -> Self {
        IateParams {
            outcome: ForestParams::default(),
            propensity: ForestParams::propensity_default(),
            final_stage: ForestParams::default(),
            seed: 17,
        }
    }
}

impl IateParams {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Shrinks every forest in the pipeline, for tests and quick runs.
    pub fn with_num_trees(mut self, num_trees: usize) -> Self {
        self.outcome.num_trees = num_trees;
        self.propensity.num_trees = num_trees;
        self.final_stage.num_trees = num_trees;
        self
    }
}

/// Weighted prediction of the pseudo-outcome regression at one point.
pub fn dr_final_prediction(alpha: &SmootherWeights, pseudo: &[f64]) -> f64 {
    alpha.dot(pseudo)
}

/// Residual weights for one arm: lambda_i = alpha_i * D_i(w) / e_hat_w(X_i),
/// normalised to sum to one. `treated` and `e_hat_w` are indexed by training
/// row, like the smoother weights.
#[derive(Debug, Clone)]
pub struct NdrWeights {
    /// Aligned with the smoother weight indices.
    pub lambda: Vec<f64>,
    /// Set when the arm receives no smoother mass; lambda is all zeros.
    pub zero_mass: bool,
}

pub fn ndr_weights(alpha: &SmootherWeights, treated: &[bool], e_hat_w: &[f64]) -> NdrWeights {
    let mut lambda: Vec<f64> = alpha
        .indices
        .iter()
        .zip(&alpha.weights)
        .map(|(&i, &a)| if treated[i] { a / e_hat_w[i] } else { 0.0 })
        .collect();
    let total = pairwise_sum(&lambda);
    if total > 0.0 {
        for l in &mut lambda {
            *l /= total;
        }
        NdrWeights {
            lambda,
            zero_mass: false,
        }
    } else {
        for l in &mut lambda {
            *l = 0.0;
        }
        NdrWeights {
            lambda,
            zero_mass: true,
        }
    }
}

/// Rebuilds one prediction from smoother weights: the weighted outcome-model
/// contrast plus the per-arm normalised residual terms. Returns the estimate
/// and whether either arm fell back to the (zero) unnormalised term.
#[allow(clippy::too_many_arguments)]
pub fn ndr_prediction(
    alpha: &SmootherWeights,
    mu_w: &[f64],
    mu_v: &[f64],
    y: &[f64],
    treated_w: &[bool],
    treated_v: &[bool],
    e_w: &[f64],
    e_v: &[f64],
) -> (f64, bool) {
    let mu_part: Vec<f64> = alpha
        .indices
        .iter()
        .zip(&alpha.weights)
        .map(|(&i, &a)| a * (mu_w[i] - mu_v[i]))
        .collect();
    let mut value = pairwise_sum(&mu_part);
    let mut fallback = false;
    for (sign, treated, mu, e) in [(1.0, treated_w, mu_w, e_w), (-1.0, treated_v, mu_v, e_v)] {
        let weights = ndr_weights(alpha, treated, e);
        if weights.zero_mass {
            fallback = true;
            continue;
        }
        let terms: Vec<f64> = alpha
            .indices
            .iter()
            .zip(&weights.lambda)
            .map(|(&i, &l)| l * (y[i] - mu[i]))
            .collect();
        value += sign * pairwise_sum(&terms);
    }
    (value, fallback)
}

fn check_pair(ds: &Dataset, arm: usize, versus: usize) -> Result<()> {
    if arm >= ds.num_arms || versus >= ds.num_arms {
        return Err(Error::invalid_param(format!(
            "contrast ({arm}, {versus}) outside 0..{}",
            ds.num_arms
        )));
    }
    if arm == versus {
        return Err(Error::invalid_param(
            "effect learners need two distinct arms",
        ));
    }
    Ok(())
}

fn pseudo_outcome(ds: &Dataset, nu: &NuisanceEstimates, arm: usize, versus: usize) -> Vec<f64> {
    (0..ds.n())
        .map(|i| {
            let mut v = nu.mu_hat[[i, arm]] - nu.mu_hat[[i, versus]];
            if ds.w[i] == arm {
                v += (ds.y[i] - nu.mu_hat[[i, arm]]) / nu.e_hat[[i, arm]];
            }
            if ds.w[i] == versus {
                v -= (ds.y[i] - nu.mu_hat[[i, versus]]) / nu.e_hat[[i, versus]];
            }
            v
        })
        .collect()
}

/// In-sample DR-learner: one smoother of the contrast scores on X over the
/// full sample.
pub fn dr_learner_full(
    ds: &Dataset,
    nu: &NuisanceEstimates,
    arm: usize,
    versus: usize,
    final_params: &ForestParams,
) -> Result<IateResult> {
    check_pair(ds, arm, versus)?;
    let pseudo = pseudo_outcome(ds, nu, arm, versus);
    let forest = ForestModel::fit(ds.x.view(), Array1::from_vec(pseudo).view(), final_params)?;
    let tau_hat = forest.predict_batch(ds.x.view())?;
    Ok(IateResult {
        learner: Learner::DrFull,
        arm,
        versus,
        tau_hat,
        fold: None,
        fallback: vec![false; ds.n()],
    })
}

/// In-sample NDR-learner: same smoother as the DR-learner, with every
/// prediction rebuilt through the weight normalisation.
pub fn ndr_learner_full(
    ds: &Dataset,
    nu: &NuisanceEstimates,
    arm: usize,
    versus: usize,
    final_params: &ForestParams,
) -> Result<IateResult> {
    check_pair(ds, arm, versus)?;
    let pseudo = pseudo_outcome(ds, nu, arm, versus);
    let forest = ForestModel::fit(ds.x.view(), Array1::from_vec(pseudo).view(), final_params)?;

    let mu_w: Vec<f64> = (0..ds.n()).map(|i| nu.mu_hat[[i, arm]]).collect();
    let mu_v: Vec<f64> = (0..ds.n()).map(|i| nu.mu_hat[[i, versus]]).collect();
    let e_w: Vec<f64> = (0..ds.n()).map(|i| nu.e_hat[[i, arm]]).collect();
    let e_v: Vec<f64> = (0..ds.n()).map(|i| nu.e_hat[[i, versus]]).collect();
    let treated_w: Vec<bool> = ds.w.iter().map(|&w| w == arm).collect();
    let treated_v: Vec<bool> = ds.w.iter().map(|&w| w == versus).collect();
    let y: Vec<f64> = ds.y.to_vec();

    let results: Vec<(f64, bool)> = (0..ds.n())
        .into_par_iter()
        .map(|i| {
            let alpha = forest.weights_at(ds.x.row(i))?;
            Ok(ndr_prediction(
                &alpha, &mu_w, &mu_v, &y, &treated_w, &treated_v, &e_w, &e_v,
            ))
        })
        .collect::<Result<_>>()?;

    Ok(IateResult {
        learner: Learner::NdrFull,
        arm,
        versus,
        tau_hat: results.iter().map(|r| r.0).collect(),
        fold: None,
        fallback: results.iter().map(|r| r.1).collect(),
    })
}

/// Output of one rotation: predictions for the held-out rows.
struct RotationOutput {
    held_out: usize,
    dr: Vec<f64>,
    ndr: Vec<f64>,
    fallback: Vec<bool>,
}

const CROSSFIT_FOLDS: usize = 4;

/// Cross-fitted DR- and NDR-learner for one pair, sharing nuisance and
/// final-stage forests between the two. Fold roles rotate so that held-out
/// predictions never depend on held-out outcomes.
pub fn crossfit_pair(
    ds: &Dataset,
    arm: usize,
    versus: usize,
    params: &IateParams,
) -> Result<(IateResult, IateResult)> {
    check_pair(ds, arm, versus)?;
    let folds = assign_folds(ds, CROSSFIT_FOLDS, params.seed)?;
    let n = ds.n();

    let mut cell = vec![[0usize; CROSSFIT_FOLDS]; ds.num_arms];
    for i in 0..n {
        cell[ds.w[i]][folds.fold[i]] += 1;
    }
    for &a in &[arm, versus] {
        for f in 0..CROSSFIT_FOLDS {
            if cell[a][f] < 4 {
                return Err(Error::invalid_data(format!(
                    "arm {a} has only {} observations in fold {f}; need at least 4 per fold for the crossfit learners",
                    cell[a][f]
                )));
            }
        }
    }

    let fold_rows: Vec<Vec<usize>> = (0..CROSSFIT_FOLDS)
        .map(|f| (0..n).filter(|&i| folds.fold[i] == f).collect())
        .collect();

    // Iterations hold out each quarter once, last fold first; within an
    // iteration the remaining folds take the roles (propensity, outcome,
    // pseudo-outcome regression) in the three cyclic orders.
    let mut jobs = Vec::new();
    for (t, &held_out) in [3usize, 2, 1, 0].iter().enumerate() {
        let rem: Vec<usize> = (0..CROSSFIT_FOLDS).filter(|&f| f != held_out).collect();
        for r in 0..3 {
            let roles = (rem[r], rem[(r + 1) % 3], rem[(r + 2) % 3]);
            jobs.push((t, r, held_out, roles));
        }
    }

    let outputs: Vec<RotationOutput> = jobs
        .par_iter()
        .map(|&(t, r, held_out, (prop_fold, out_fold, pseudo_fold))| {
            run_rotation(
                ds,
                arm,
                versus,
                params,
                t,
                r,
                held_out,
                &fold_rows[prop_fold],
                &fold_rows[out_fold],
                &fold_rows[pseudo_fold],
                &fold_rows[held_out],
            )
        })
        .collect::<Result<_>>()?;

    let mut dr_sum = vec![0.0; n];
    let mut ndr_sum = vec![0.0; n];
    let mut fallback = vec![false; n];
    for out in &outputs {
        for (slot, &i) in fold_rows[out.held_out].iter().enumerate() {
            dr_sum[i] += out.dr[slot];
            ndr_sum[i] += out.ndr[slot];
            fallback[i] |= out.fallback[slot];
        }
    }
    let dr_tau: Vec<f64> = dr_sum.iter().map(|v| v / 3.0).collect();
    let ndr_tau: Vec<f64> = ndr_sum.iter().map(|v| v / 3.0).collect();

    let dr = IateResult {
        learner: Learner::DrCrossfit,
        arm,
        versus,
        tau_hat: dr_tau,
        fold: Some(folds.fold.clone()),
        fallback: vec![false; n],
    };
    let ndr = IateResult {
        learner: Learner::NdrCrossfit,
        arm,
        versus,
        tau_hat: ndr_tau,
        fold: Some(folds.fold),
        fallback,
    };
    Ok((dr, ndr))
}

pub fn dr_learner_crossfit(
    ds: &Dataset,
    arm: usize,
    versus: usize,
    params: &IateParams,
) -> Result<IateResult> {
    Ok(crossfit_pair(ds, arm, versus, params)?.0)
}

pub fn ndr_learner_crossfit(
    ds: &Dataset,
    arm: usize,
    versus: usize,
    params: &IateParams,
) -> Result<IateResult> {
    Ok(crossfit_pair(ds, arm, versus, params)?.1)
}

#[allow(clippy::too_many_arguments)]
fn run_rotation(
    ds: &Dataset,
    arm: usize,
    versus: usize,
    params: &IateParams,
    t: usize,
    r: usize,
    held_out: usize,
    prop_rows: &[usize],
    out_rows: &[usize],
    pseudo_rows: &[usize],
    held_rows: &[usize],
) -> Result<RotationOutput> {
    let x = ds.x.view();
    let x_pseudo = gather_rows(&x, pseudo_rows);
    let x_held = gather_rows(&x, held_rows);
    let salt = |role: u64, a: usize| mix_seed(params.seed, &[role, t as u64, r as u64, a as u64]);

    // Propensities for the two arms only, fitted as one-vs-rest regressions
    // on the propensity fold and clipped; no cross-arm normalisation is
    // possible (or needed) for a single pair.
    let x_prop = gather_rows(&x, prop_rows);
    let mut e_hats = Vec::with_capacity(2);
    for &a in &[arm, versus] {
        let indicator: Vec<f64> = prop_rows
            .iter()
            .map(|&i| if ds.w[i] == a { 1.0 } else { 0.0 })
            .collect();
        let p = params.propensity.clone().with_seed(salt(1, a));
        let model = ForestModel::fit(x_prop.view(), Array1::from_vec(indicator).view(), &p)
            .map_err(|e| e.in_stage(format!("propensity forest for arm {a}")))?;
        let preds = model.predict_batch(x_pseudo.view())?;
        e_hats.push(
            preds
                .into_iter()
                .map(|v| v.clamp(PROPENSITY_FLOOR, 1.0))
                .collect::<Vec<f64>>(),
        );
    }

    // Outcome models per arm on the outcome fold, evaluated where the
    // pseudo-outcome lives.
    let mut mu_hats = Vec::with_capacity(2);
    for &a in &[arm, versus] {
        let rows: Vec<usize> = out_rows.iter().copied().filter(|&i| ds.w[i] == a).collect();
        let x_a = gather_rows(&x, &rows);
        let y_a: Vec<f64> = rows.iter().map(|&i| ds.y[i]).collect();
        let p = params.outcome.clone().with_seed(salt(2, a));
        let model = ForestModel::fit(x_a.view(), Array1::from_vec(y_a).view(), &p)
            .map_err(|e| e.in_stage(format!("outcome forest for arm {a}")))?;
        mu_hats.push(model.predict_batch(x_pseudo.view())?);
    }

    let m = pseudo_rows.len();
    let y: Vec<f64> = pseudo_rows.iter().map(|&i| ds.y[i]).collect();
    let treated_w: Vec<bool> = pseudo_rows.iter().map(|&i| ds.w[i] == arm).collect();
    let treated_v: Vec<bool> = pseudo_rows.iter().map(|&i| ds.w[i] == versus).collect();
    let pseudo: Vec<f64> = (0..m)
        .map(|j| {
            let mut v = mu_hats[0][j] - mu_hats[1][j];
            if treated_w[j] {
                v += (y[j] - mu_hats[0][j]) / e_hats[0][j];
            }
            if treated_v[j] {
                v -= (y[j] - mu_hats[1][j]) / e_hats[1][j];
            }
            v
        })
        .collect();

    let fp = params.final_stage.clone().with_seed(salt(3, 0));
    let forest = ForestModel::fit(
        x_pseudo.view(),
        Array1::from_vec(pseudo.clone()).view(),
        &fp,
    )
    .map_err(|e| e.in_stage("pseudo-outcome forest"))?;

    let mut dr = Vec::with_capacity(held_rows.len());
    let mut ndr = Vec::with_capacity(held_rows.len());
    let mut fallback = Vec::with_capacity(held_rows.len());
    for h in 0..held_rows.len() {
        let alpha = forest.weights_at(x_held.row(h))?;
        dr.push(dr_final_prediction(&alpha, &pseudo));
        let (v, fb) = ndr_prediction(
            &alpha,
            &mu_hats[0],
            &mu_hats[1],
            &y,
            &treated_w,
            &treated_v,
            &e_hats[0],
            &e_hats[1],
        );
        ndr.push(v);
        fallback.push(fb);
    }
    Ok(RotationOutput {
        held_out,
        dr,
        ndr,
        fallback,
    })
}

/// One covariate's contribution to the quintile comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationRow {
    pub covariate: String,
    /// Mean of the standardized covariate over the bottom effect quintile.
    pub bottom_mean: f64,
    /// Same for the top quintile.
    pub top_mean: f64,
    pub difference: f64,
    pub zero_variance: bool,
}

/// Compares standardized covariate means between the top and bottom
/// quintiles of the estimated effects, strongest contrast first.
pub fn classification_analysis(
    tau_hat: &[f64],
    x: ArrayView2<f64>,
    x_names: &[String],
) -> Result<Vec<ClassificationRow>> {
    let n = tau_hat.len();
    if n < 10 {
        return Err(Error::invalid_data(format!(
            "classification analysis needs at least 10 observations, got {n}"
        )));
    }
    if x.nrows() != n || x.ncols() != x_names.len() {
        return Err(Error::invalid_data(
            "covariate matrix does not match effects or names",
        ));
    }
    let q20 = quantile(tau_hat, 0.2);
    let q80 = quantile(tau_hat, 0.8);
    let bottom: Vec<usize> = (0..n).filter(|&i| tau_hat[i] <= q20).collect();
    let top: Vec<usize> = (0..n).filter(|&i| tau_hat[i] >= q80).collect();
    let std = standardize(&x);

    let mut rows = Vec::with_capacity(x.ncols());
    for j in 0..x.ncols() {
        let col = std.values.column(j);
        let bottom_vals: Vec<f64> = bottom.iter().map(|&i| col[i]).collect();
        let top_vals: Vec<f64> = top.iter().map(|&i| col[i]).collect();
        let bottom_mean = pairwise_sum(&bottom_vals) / bottom_vals.len() as f64;
        let top_mean = pairwise_sum(&top_vals) / top_vals.len() as f64;
        rows.push(ClassificationRow {
            covariate: x_names[j].clone(),
            bottom_mean,
            top_mean,
            difference: top_mean - bottom_mean,
            zero_variance: std.zero_variance[j],
        });
    }
    rows.sort_by(|a, b| {
        b.difference
            .abs()
            .partial_cmp(&a.difference.abs())
            .expect("finite differences")
    });
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, SyntheticSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn uniform_alpha(n: usize) -> SmootherWeights {
        SmootherWeights {
            indices: (0..n).collect(),
            weights: vec![1.0 / n as f64; n],
        }
    }

    #[test]
    fn ndr_weights_single_point_gets_full_mass() {
        let alpha = SmootherWeights {
            indices: vec![2],
            weights: vec![1.0],
        };
        let treated = vec![false, false, true];
        let e = vec![0.5, 0.5, 0.037];
        let w = ndr_weights(&alpha, &treated, &e);
        assert!(!w.zero_mass);
        assert_abs_diff_eq!(w.lambda[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ndr_weights_match_hand_arithmetic() {
        let alpha = SmootherWeights {
            indices: vec![0, 1],
            weights: vec![0.5, 0.5],
        };
        let treated = vec![true, true];
        let e = vec![0.25, 0.5];
        let w = ndr_weights(&alpha, &treated, &e);
        // lambda = (2, 1) before normalisation.
        assert_abs_diff_eq!(w.lambda[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.lambda[1], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn equal_propensities_reduce_to_renormalised_alpha() {
        let alpha = SmootherWeights {
            indices: vec![0, 1, 2, 3],
            weights: vec![0.4, 0.3, 0.2, 0.1],
        };
        let treated = vec![true, false, true, false];
        let e = vec![0.37; 4];
        let w = ndr_weights(&alpha, &treated, &e);
        let mass = 0.4 + 0.2;
        assert_abs_diff_eq!(w.lambda[0], 0.4 / mass, epsilon = 1e-12);
        assert_abs_diff_eq!(w.lambda[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.lambda[2], 0.2 / mass, epsilon = 1e-12);
    }

    #[test]
    fn zero_mass_arm_is_flagged() {
        let alpha = uniform_alpha(3);
        let treated = vec![false, false, false];
        let e = vec![0.5; 3];
        let w = ndr_weights(&alpha, &treated, &e);
        assert!(w.zero_mass);
        assert!(w.lambda.iter().all(|&l| l == 0.0));

        let (value, fallback) = ndr_prediction(
            &alpha,
            &[1.0, 1.0, 1.0],
            &[0.0, 0.0, 0.0],
            &[5.0, 5.0, 5.0],
            &treated,
            &[true, true, true],
            &e,
            &e,
        );
        assert!(fallback);
        // Only the outcome-model contrast and the versus-arm residual term
        // remain: 1 - mean residual of versus arm (5 - 0 = 5).
        assert_abs_diff_eq!(value, 1.0 - 5.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_alpha_reproduces_hajek_estimator() {
        // Intercept-only final stage: the NDR value must equal the
        // Hajek-normalised AIPW ATE computed directly.
        let n = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mu_w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mu_v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let treated_w: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let treated_v: Vec<bool> = (0..n).map(|i| i % 3 == 1).collect();
        let e_w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..0.8)).collect();
        let e_v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..0.8)).collect();

        let alpha = uniform_alpha(n);
        let (value, fallback) =
            ndr_prediction(&alpha, &mu_w, &mu_v, &y, &treated_w, &treated_v, &e_w, &e_v);
        assert!(!fallback);

        let mu_diff: f64 = (0..n).map(|i| mu_w[i] - mu_v[i]).sum::<f64>() / n as f64;
        let hajek = |treated: &[bool], mu: &[f64], e: &[f64]| {
            let num: f64 = (0..n)
                .filter(|&i| treated[i])
                .map(|i| (y[i] - mu[i]) / e[i])
                .sum();
            let den: f64 = (0..n).filter(|&i| treated[i]).map(|i| 1.0 / e[i]).sum();
            num / den
        };
        let oracle = mu_diff + hajek(&treated_w, &mu_w, &e_w) - hajek(&treated_v, &mu_v, &e_v);
        assert_abs_diff_eq!(value, oracle, epsilon = 1e-10);

        // The same uniform weights make the DR final stage the plain mean.
        let pseudo: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let dr = dr_final_prediction(&alpha, &pseudo);
        assert_abs_diff_eq!(dr, 19.5, epsilon = 1e-10);
    }

    #[test]
    fn ndr_equals_dr_when_residual_weights_already_sum_to_one() {
        // Two training points; each arm's lambda sums to exactly 1.
        let alpha = SmootherWeights {
            indices: vec![0, 1],
            weights: vec![0.5, 0.5],
        };
        let y = vec![3.0, -2.0];
        let mu_w = vec![1.0, 0.5];
        let mu_v = vec![0.25, -1.0];
        let treated_w = vec![true, false];
        let treated_v = vec![false, true];
        let e = vec![0.5, 0.5];
        let (ndr, fallback) =
            ndr_prediction(&alpha, &mu_w, &mu_v, &y, &treated_w, &treated_v, &e, &e);
        assert!(!fallback);

        let pseudo: Vec<f64> = (0..2)
            .map(|i| {
                let mut v = mu_w[i] - mu_v[i];
                if treated_w[i] {
                    v += (y[i] - mu_w[i]) / e[i];
                }
                if treated_v[i] {
                    v -= (y[i] - mu_v[i]) / e[i];
                }
                v
            })
            .collect();
        let dr = dr_final_prediction(&alpha, &pseudo);
        assert_abs_diff_eq!(ndr, dr, epsilon = 1e-10);
    }

    #[test]
    fn normalised_residual_terms_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.gen_range(3..20);
            let mut weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let total: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= total;
            }
            let alpha = SmootherWeights {
                indices: (0..n).collect(),
                weights,
            };
            let treated: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            if !treated.iter().any(|&t| t) {
                continue;
            }
            let e: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
            let resid: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let w = ndr_weights(&alpha, &treated, &e);
            let term: f64 = (0..n).map(|i| w.lambda[i] * resid[i]).sum();
            let lo = (0..n)
                .filter(|&i| treated[i])
                .map(|i| resid[i])
                .fold(f64::INFINITY, f64::min);
            let hi = (0..n)
                .filter(|&i| treated[i])
                .map(|i| resid[i])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(
                term >= lo - 1e-10 && term <= hi + 1e-10,
                "term {term} outside [{lo}, {hi}]"
            );
        }
    }

    fn exact_nuisances(ds: &Dataset, mu: impl Fn(usize, f64) -> f64, e1: f64) -> NuisanceEstimates {
        let n = ds.n();
        let mut mu_hat = Array2::<f64>::zeros((n, 2));
        let mut e_hat = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            mu_hat[[i, 0]] = mu(0, ds.x[[i, 0]]);
            mu_hat[[i, 1]] = mu(1, ds.x[[i, 0]]);
            e_hat[[i, 0]] = 1.0 - e1;
            e_hat[[i, 1]] = e1;
        }
        NuisanceEstimates {
            mu_hat,
            e_hat,
            fold: vec![0; n],
            trimmed: vec![false; n],
        }
    }

    fn two_arm_dataset(n: usize, seed: u64, effect: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n);
        let mut xv = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = rng.gen_range(-1.0..1.0);
            let arm = usize::from(rng.gen_bool(0.5));
            y.push(if arm == 1 { effect } else { 0.0 });
            w.push(arm);
            xv.push(x);
        }
        let x = Array2::from_shape_vec((n, 1), xv).unwrap();
        Dataset::from_encoded(Array1::from_vec(y), &w, 2, x, vec!["x1".into()], &[0]).unwrap()
    }

    #[test]
    fn constant_pseudo_outcome_gives_constant_iates() {
        // y depends on the arm alone and the nuisances are exact, so every
        // contrast score equals the effect and so must every prediction.
        let ds = two_arm_dataset(300, 11, 2.5);
        let nu = exact_nuisances(&ds, |a, _| if a == 1 { 2.5 } else { 0.0 }, 0.5);
        let fp = ForestParams::default().with_num_trees(30);
        let dr = dr_learner_full(&ds, &nu, 1, 0, &fp).unwrap();
        for t in &dr.tau_hat {
            assert_abs_diff_eq!(*t, 2.5, epsilon = 1e-10);
        }
        let ndr = ndr_learner_full(&ds, &nu, 1, 0, &fp).unwrap();
        for t in &ndr.tau_hat {
            assert_abs_diff_eq!(*t, 2.5, epsilon = 1e-10);
        }
        assert!(!ndr.fallback.iter().any(|&f| f));
    }

    #[test]
    fn single_leaf_final_stage_stays_near_the_score_mean() {
        let ds = two_arm_dataset(400, 23, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut noisy = ds.clone();
        for i in 0..noisy.n() {
            noisy.y[i] += rng.sample::<f64, _>(StandardNormal);
        }
        let nu = exact_nuisances(&noisy, |a, _| if a == 1 { 1.0 } else { 0.0 }, 0.5);
        let pseudo = pseudo_outcome(&noisy, &nu, 1, 0);
        let mean = pairwise_sum(&pseudo) / pseudo.len() as f64;
        let sd = crate::stats::sample_sd(&pseudo);

        let fp = ForestParams::default()
            .with_num_trees(400)
            .with_min_leaf(10_000);
        let dr = dr_learner_full(&noisy, &nu, 1, 0, &fp).unwrap();
        for t in &dr.tau_hat {
            assert!(
                (t - mean).abs() < 0.05 * sd,
                "single-leaf prediction {t} drifted from mean {mean}"
            );
        }
    }

    #[test]
    fn crossfit_holds_out_each_quarter_exactly_once() {
        let ds = two_arm_dataset(240, 5, 1.0);
        let params = IateParams::default().with_num_trees(20).with_seed(7);
        let (dr, ndr) = crossfit_pair(&ds, 1, 0, &params).unwrap();
        let folds = assign_folds(&ds, 4, params.seed).unwrap();
        assert_eq!(dr.fold.as_ref().unwrap(), &folds.fold);
        assert_eq!(ndr.fold.as_ref().unwrap(), &folds.fold);
        assert!(dr.tau_hat.iter().all(|t| t.is_finite()));
        assert!(ndr.tau_hat.iter().all(|t| t.is_finite()));
    }

    #[test]
    fn held_out_predictions_ignore_held_out_outcomes() {
        let ds = two_arm_dataset(320, 31, 1.5);
        let params = IateParams::default().with_num_trees(25).with_seed(3);
        let (dr_base, ndr_base) = crossfit_pair(&ds, 1, 0, &params).unwrap();

        // Scramble outcomes inside fold 3 only; fold assignment depends on
        // treatments and seed, so it is unchanged.
        let folds = assign_folds(&ds, 4, params.seed).unwrap();
        let in_fold: Vec<usize> = (0..ds.n()).filter(|&i| folds.fold[i] == 3).collect();
        let mut scrambled = ds.clone();
        for pair in in_fold.chunks(2) {
            if let [a, b] = pair {
                scrambled.y.swap(*a, *b);
            }
        }
        for &i in &in_fold {
            scrambled.y[i] += 10.0;
        }
        let (dr_scr, ndr_scr) = crossfit_pair(&scrambled, 1, 0, &params).unwrap();

        let mut changed_elsewhere = false;
        for i in 0..ds.n() {
            if folds.fold[i] == 3 {
                assert_eq!(
                    dr_base.tau_hat[i].to_bits(),
                    dr_scr.tau_hat[i].to_bits(),
                    "held-out DR estimate moved at row {i}"
                );
                assert_eq!(
                    ndr_base.tau_hat[i].to_bits(),
                    ndr_scr.tau_hat[i].to_bits(),
                    "held-out NDR estimate moved at row {i}"
                );
            } else if dr_base.tau_hat[i] != dr_scr.tau_hat[i] {
                changed_elsewhere = true;
            }
        }
        assert!(changed_elsewhere, "scrambling had no effect anywhere");
    }

    #[test]
    fn crossfit_is_deterministic_given_seed() {
        let ds = two_arm_dataset(240, 13, 0.5);
        let params = IateParams::default().with_num_trees(15).with_seed(5);
        let (dr1, ndr1) = crossfit_pair(&ds, 1, 0, &params).unwrap();
        let (dr2, ndr2) = crossfit_pair(&ds, 1, 0, &params).unwrap();
        assert_eq!(dr1.tau_hat, dr2.tau_hat);
        assert_eq!(ndr1.tau_hat, ndr2.tau_hat);
    }

    #[test]
    fn small_arm_cells_are_rejected() {
        let ds = two_arm_dataset(24, 2, 1.0);
        let params = IateParams::default().with_num_trees(10);
        let err = crossfit_pair(&ds, 1, 0, &params).unwrap_err();
        assert!(
            err.to_string().contains("at least 4 per fold"),
            "got: {err}"
        );
    }

    #[test]
    fn ndr_suppresses_outliers_under_thin_overlap() {
        let mut wins = 0;
        for seed in 0..20u64 {
            let spec = SyntheticSpec::binary_thin_overlap(1600);
            let (ds, _) = generate_synthetic(&spec, 1000 + seed).unwrap();
            // A fine-grained final stage lets single extreme pseudo-outcomes
            // dominate local predictions, which is exactly the failure mode
            // the normalisation is meant to cap. The propensity forest gets
            // enough resolution to actually reach the thin region's 0.02.
            let mut params = IateParams::default().with_num_trees(40).with_seed(seed);
            params.propensity.num_trees = 50;
            params.propensity.min_leaf = 5;
            params.final_stage.min_leaf = 1;
            params.final_stage.subsample_fraction = 1.0;
            let (dr, ndr) = crossfit_pair(&ds, 1, 0, &params).unwrap();
            let max_dr = dr.tau_hat.iter().fold(0.0f64, |m, t| m.max(t.abs()));
            let max_ndr = ndr.tau_hat.iter().fold(0.0f64, |m, t| m.max(t.abs()));
            if max_ndr <= max_dr {
                wins += 1;
            }
        }
        assert!(
            wins >= 19,
            "normalisation capped the extremes in only {wins}/20 runs"
        );
    }

    #[test]
    fn classification_ranks_the_perfectly_correlated_covariate_first() {
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let tau: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut x = Array2::<f64>::zeros((n, 3));
        for i in 0..n {
            x[[i, 0]] = rng.sample::<f64, _>(StandardNormal); // independent
            x[[i, 1]] = tau[i]; // identical to the effect
            x[[i, 2]] = 3.25; // constant
        }
        let names = vec![
            "noise".to_string(),
            "mirror".to_string(),
            "flat".to_string(),
        ];
        let rows = classification_analysis(&tau, x.view(), &names).unwrap();

        assert_eq!(rows[0].covariate, "mirror");
        assert!(
            rows[0].difference > 1.0,
            "perfect-correlation gap was {}",
            rows[0].difference
        );
        let noise = rows.iter().find(|r| r.covariate == "noise").unwrap();
        assert!(noise.difference.abs() < 0.1);
        let flat = rows.iter().find(|r| r.covariate == "flat").unwrap();
        assert!(flat.zero_variance);
        assert_abs_diff_eq!(flat.difference, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn classification_needs_ten_observations() {
        let tau = vec![1.0; 5];
        let x = Array2::<f64>::zeros((5, 1));
        assert!(classification_analysis(&tau, x.view(), &["a".into()]).is_err());
    }

    #[test]
    fn full_sample_ndr_flags_are_rare_on_balanced_data() {
        let spec = SyntheticSpec::default_three_arm(400);
        let (ds, _) = generate_synthetic(&spec, 3).unwrap();
        let folds = assign_folds(&ds, 5, 1).unwrap();
        let nu = crate::nuisance::crossfit(
            &ds,
            &folds,
            &crate::nuisance::NuisanceParams::default().with_num_trees(30),
            None,
        )
        .unwrap();
        let fp = ForestParams::default().with_num_trees(30);
        let ndr = ndr_learner_full(&ds, &nu, 1, 0, &fp).unwrap();
        let flagged = ndr.fallback.iter().filter(|&&f| f).count();
        assert!(
            flagged * 10 < ds.n(),
            "{flagged} of {} points lost an arm entirely",
            ds.n()
        );
    }
}
