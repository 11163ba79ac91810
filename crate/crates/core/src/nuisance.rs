//! Cross-fitted nuisance estimates: conditional outcome means per arm and
//! treatment propensities.
//!
//! For each fold k and arm w, the outcome model is fitted on observations
//! with W = w outside fold k, and the propensity model is a regression
//! forest on the one-vs-rest indicator fitted on all observations outside
//! fold k. Raw propensities are floored at 1e-6 and each row is normalized
//! to sum to one. Fold-k predictions therefore depend only on data outside
//! fold k plus fold-k covariates.

use crate::data::{Dataset, FoldAssignment};
use crate::error::{Error, Result};
use crate::forest::{default_tuning_grid, ForestModel, ForestParams};
use crate::stats::{mean, mix_seed, quantile_sorted, sample_sd};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const PROPENSITY_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct NuisanceParams {
    pub outcome: ForestParams,
    pub propensity: ForestParams,
    /// When set, each regression first selects (mtry, min_leaf) by
    /// out-of-bag MSE over the default grid.
    pub tune: bool,
}

impl Default for NuisanceParams {
    fn default() -> Self {
        NuisanceParams {
            outcome: ForestParams::default(),
            propensity: ForestParams::propensity_default(),
            tune: false,
        }
    }
}

impl NuisanceParams {
    pub fn with_num_trees(mut self, b: usize) -> Self {
        self.outcome.num_trees = b;
        self.propensity.num_trees = b;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.outcome.seed = seed;
        self.propensity.seed = seed;
        self
    }
}

#[derive(Debug, Clone)]
pub struct NuisanceEstimates {
    /// mu_hat[[i, w]]: cross-fitted conditional mean outcome of arm w.
    pub mu_hat: Array2<f64>,
    /// e_hat[[i, w]]: cross-fitted propensity, floored and row-normalized.
    pub e_hat: Array2<f64>,
    /// Fold each observation belonged to when predicted.
    pub fold: Vec<usize>,
    /// Rows where any normalized propensity fell below the trim threshold.
    pub trimmed: Vec<bool>,
}

enum JobKind {
    Outcome,
    Propensity,
}

/// K-fold cross-fitting of all 2 * num_arms * K nuisance regressions.
pub fn crossfit(
    ds: &Dataset,
    folds: &FoldAssignment,
    params: &NuisanceParams,
    trim: Option<f64>,
) -> Result<NuisanceEstimates> {
    let n = ds.n();
    if folds.fold.len() != n {
        return Err(Error::invalid_data(
            "fold assignment length does not match dataset",
        ));
    }
    let k = folds.num_folds;
    let arms = ds.num_arms;

    // Every (arm, fold-complement) training cell must support a forest.
    for arm in 0..arms {
        for fold in 0..k {
            let cell = (0..n)
                .filter(|&i| ds.w[i] == arm && folds.fold[i] != fold)
                .count();
            if cell < 2 {
                return Err(Error::invalid_data(format!(
                    "arm {arm} has only {cell} observations outside fold {fold}; cannot fit outcome model"
                )));
            }
        }
    }

    struct Job {
        kind: JobKind,
        arm: usize,
        fold: usize,
    }
    let mut jobs = Vec::with_capacity(2 * arms * k);
    for arm in 0..arms {
        for fold in 0..k {
            jobs.push(Job {
                kind: JobKind::Outcome,
                arm,
                fold,
            });
            jobs.push(Job {
                kind: JobKind::Propensity,
                arm,
                fold,
            });
        }
    }

    let results: Vec<Result<(usize, usize, bool, Vec<usize>, Vec<f64>)>> = jobs
        .par_iter()
        .map(|job| {
            let test_rows: Vec<usize> = (0..n).filter(|&i| folds.fold[i] == job.fold).collect();
            let (train_rows, y_train, base): (Vec<usize>, Vec<f64>, &ForestParams) = match job.kind
            {
                JobKind::Outcome => {
                    let rows: Vec<usize> = (0..n)
                        .filter(|&i| ds.w[i] == job.arm && folds.fold[i] != job.fold)
                        .collect();
                    let y: Vec<f64> = rows.iter().map(|&i| ds.y[i]).collect();
                    (rows, y, &params.outcome)
                }
                JobKind::Propensity => {
                    let rows: Vec<usize> = (0..n).filter(|&i| folds.fold[i] != job.fold).collect();
                    let y: Vec<f64> = rows
                        .iter()
                        .map(|&i| if ds.w[i] == job.arm { 1.0 } else { 0.0 })
                        .collect();
                    (rows, y, &params.propensity)
                }
            };

            let x_train = gather_rows(&ds.x.view(), &train_rows);
            let y_train = Array1::from_vec(y_train);
            let salt = match job.kind {
                JobKind::Outcome => 1u64,
                JobKind::Propensity => 2u64,
            };
            let mut forest_params = base.clone();
            forest_params.seed = mix_seed(base.seed, &[salt, job.arm as u64, job.fold as u64]);
            if params.tune {
                let mut grid = default_tuning_grid(ds.x.ncols(), &forest_params);
                // Keep leaf sizes feasible for small training cells.
                let cap = (x_train.nrows() / 2).max(1);
                for g in &mut grid {
                    g.min_leaf = g.min_leaf.min(cap);
                }
                grid.dedup_by(|a, b| a.min_leaf == b.min_leaf && a.mtry == b.mtry);
                forest_params = ForestModel::tune(x_train.view(), y_train.view(), &grid)?;
            }
            let model = ForestModel::fit(x_train.view(), y_train.view(), &forest_params)?;
            let x_test = gather_rows(&ds.x.view(), &test_rows);
            let preds = model.predict_batch(x_test.view())?;
            Ok((
                job.arm,
                job.fold,
                matches!(job.kind, JobKind::Outcome),
                test_rows,
                preds,
            ))
        })
        .collect();

    let mut mu_hat = Array2::<f64>::zeros((n, arms));
    let mut e_raw = Array2::<f64>::zeros((n, arms));
    for r in results {
        let (arm, _fold, is_outcome, rows, preds) = r?;
        for (&i, &p) in rows.iter().zip(&preds) {
            if is_outcome {
                mu_hat[[i, arm]] = p;
            } else {
                e_raw[[i, arm]] = p;
            }
        }
    }

    // Floor, then normalize each row over arms.
    let mut e_hat = e_raw;
    for mut row in e_hat.axis_iter_mut(Axis(0)) {
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = v.max(PROPENSITY_FLOOR);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }

    let trimmed: Vec<bool> = match trim {
        Some(t) => (0..n)
            .map(|i| e_hat.row(i).iter().any(|&v| v < t))
            .collect(),
        None => vec![false; n],
    };

    Ok(NuisanceEstimates {
        mu_hat,
        e_hat,
        fold: folds.fold.clone(),
        trimmed,
    })
}

pub fn gather_rows(m: &ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((rows.len(), m.ncols()));
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).assign(&m.row(i));
    }
    out
}

/// Distribution summary of one arm's estimated propensities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensitySummaryRow {
    pub arm: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub q01: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q99: f64,
    pub max: f64,
}

/// Per-arm propensity distribution table (mean, SD, extremes, and the 1%,
/// 25%, 50%, 75%, 99% quantiles under linear interpolation).
pub fn propensity_summary(e_hat: &ArrayView2<f64>) -> Vec<PropensitySummaryRow> {
    (0..e_hat.ncols())
        .map(|arm| {
            let col: Vec<f64> = e_hat.column(arm).to_vec();
            let mut sorted = col.clone();
            sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite propensities"));
            PropensitySummaryRow {
                arm,
                mean: mean(&col),
                sd: sample_sd(&col),
                min: sorted[0],
                q01: quantile_sorted(&sorted, 0.01),
                q25: quantile_sorted(&sorted, 0.25),
                q50: quantile_sorted(&sorted, 0.50),
                q75: quantile_sorted(&sorted, 0.75),
                q99: quantile_sorted(&sorted, 0.99),
                max: sorted[sorted.len() - 1],
            }
        })
        .collect()
}
