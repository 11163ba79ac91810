//! Evaluation sample container, CSV loading, and fold assignment.
//!
//! Treatments are re-encoded to contiguous codes 0..=T in order of first
//! appearance; the original labels are kept for reporting. Folds are
//! stratified by treatment arm so every (arm, fold) cell stays populated.

use crate::error::{Error, Result};
use crate::stats::mix_seed;
use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Column roles for CSV input. An empty `heterogeneity` list means the
/// heterogeneity variables default to the confounders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub outcome: String,
    pub treatment: String,
    pub confounders: Vec<String>,
    #[serde(default)]
    pub heterogeneity: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub y: Array1<f64>,
    /// Contiguous arm codes in 0..num_arms.
    pub w: Vec<usize>,
    /// Confounder matrix, one row per observation.
    pub x: Array2<f64>,
    /// Heterogeneity variables; columns may overlap with `x`.
    pub z: Array2<f64>,
    pub num_arms: usize,
    pub arm_counts: Vec<usize>,
    /// Original treatment label for each arm code.
    pub arm_labels: Vec<i64>,
    pub y_name: String,
    pub w_name: String,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from raw treatment labels, re-encoding them to
    /// contiguous codes. `z` may share columns with `x` or be disjoint.
    pub fn new(
        y: Array1<f64>,
        w_labels: &[i64],
        x: Array2<f64>,
        x_names: Vec<String>,
        z: Array2<f64>,
        z_names: Vec<String>,
    ) -> Result<Dataset> {
        let n = y.len();
        if w_labels.len() != n || x.nrows() != n || z.nrows() != n {
            return Err(Error::invalid_data(format!(
                "length mismatch: y has {n} rows, w {}, x {}, z {}",
                w_labels.len(),
                x.nrows(),
                z.nrows()
            )));
        }
        if n == 0 {
            return Err(Error::invalid_data("empty dataset"));
        }
        if x.ncols() == 0 {
            return Err(Error::invalid_data("need at least one confounder"));
        }
        if x_names.len() != x.ncols() || z_names.len() != z.ncols() {
            return Err(Error::invalid_data("column name count mismatch"));
        }
        for (i, v) in y.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::invalid_data(format!(
                    "non-finite outcome at row {}",
                    i + 1
                )));
            }
        }
        for ((i, j), v) in x.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::invalid_data(format!(
                    "non-finite value in confounder '{}' at row {}",
                    x_names[j],
                    i + 1
                )));
            }
        }
        for ((i, j), v) in z.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::invalid_data(format!(
                    "non-finite value in heterogeneity column '{}' at row {}",
                    z_names[j],
                    i + 1
                )));
            }
        }

        // Re-encode labels to 0..T in ascending label order, so the codes
        // do not depend on row order and survive a CSV round trip.
        let mut code_of: BTreeMap<i64, usize> = w_labels.iter().map(|&l| (l, 0)).collect();
        let arm_labels: Vec<i64> = code_of.keys().copied().collect();
        for (code, slot) in code_of.values_mut().enumerate() {
            *slot = code;
        }
        let w: Vec<usize> = w_labels.iter().map(|l| code_of[l]).collect();
        let num_arms = arm_labels.len();
        if num_arms < 2 {
            return Err(Error::invalid_data("need at least 2 treatment arms"));
        }
        let mut arm_counts = vec![0usize; num_arms];
        for &c in &w {
            arm_counts[c] += 1;
        }

        Ok(Dataset {
            y,
            w,
            x,
            z,
            num_arms,
            arm_counts,
            arm_labels,
            y_name: "y".into(),
            w_name: "w".into(),
            x_names,
            z_names,
        })
    }

    /// Builds a dataset whose treatment column is already contiguously
    /// coded 0..num_arms; arm labels are the codes themselves. Every code
    /// must appear at least once.
    pub fn from_encoded(
        y: Array1<f64>,
        w: &[usize],
        num_arms: usize,
        x: Array2<f64>,
        x_names: Vec<String>,
        z_cols: &[usize],
    ) -> Result<Dataset> {
        if let Some(&bad) = w.iter().find(|&&c| c >= num_arms) {
            return Err(Error::invalid_data(format!(
                "treatment code {bad} outside 0..{num_arms}"
            )));
        }
        let labels: Vec<i64> = w.iter().map(|&c| c as i64).collect();
        let mut counts = vec![0usize; num_arms];
        for &c in w {
            counts[c] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::invalid_data(format!(
                "arm {empty} has zero observations"
            )));
        }
        let mut ds = Dataset::with_z_from_x(y, &labels, x, x_names, z_cols)?;
        // Re-encoding by first appearance may permute codes; restore the
        // identity coding the caller supplied.
        ds.w = w.to_vec();
        ds.arm_labels = (0..num_arms as i64).collect();
        ds.arm_counts = counts;
        ds.num_arms = num_arms;
        Ok(ds)
    }

    /// Convenience constructor taking z as a column subset of x.
    pub fn with_z_from_x(
        y: Array1<f64>,
        w_labels: &[i64],
        x: Array2<f64>,
        x_names: Vec<String>,
        z_cols: &[usize],
    ) -> Result<Dataset> {
        for &c in z_cols {
            if c >= x.ncols() {
                return Err(Error::invalid_param(format!(
                    "heterogeneity column index {c} out of range"
                )));
            }
        }
        let z = select_columns(&x.view(), z_cols);
        let z_names = z_cols.iter().map(|&c| x_names[c].clone()).collect();
        Dataset::new(y, w_labels, x, x_names, z, z_names)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// 0/1 indicator of membership in arm `w`.
    pub fn arm_indicator(&self, arm: usize) -> Vec<f64> {
        self.w
            .iter()
            .map(|&c| if c == arm { 1.0 } else { 0.0 })
            .collect()
    }
}

pub fn select_columns(m: &ArrayView2<f64>, cols: &[usize]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((m.nrows(), cols.len()));
    for (j, &c) in cols.iter().enumerate() {
        out.column_mut(j).assign(&m.column(c));
    }
    out
}

/// Reads an RFC-4180 CSV with a header row into a [`Dataset`].
///
/// Treatment labels must be integers; any arm set is accepted and encoded
/// contiguously. Parse failures cite the 1-based data row.
pub fn load_csv(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();

    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid_data(format!("column '{name}' not found in CSV header")))
    };

    let y_col = col_index(&schema.outcome)?;
    let w_col = col_index(&schema.treatment)?;
    let x_cols: Vec<usize> = schema
        .confounders
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_>>()?;
    let het_names: Vec<String> = if schema.heterogeneity.is_empty() {
        schema.confounders.clone()
    } else {
        schema.heterogeneity.clone()
    };
    let z_cols: Vec<usize> = het_names
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_>>()?;

    let parse_f64 = |field: &str, row: usize, col: &str| -> Result<f64> {
        let v: f64 = field.trim().parse().map_err(|_| {
            Error::invalid_data(format!(
                "cannot parse '{field}' in column '{col}' at row {row}"
            ))
        })?;
        if !v.is_finite() {
            return Err(Error::invalid_data(format!(
                "non-finite value in column '{col}' at row {row}"
            )));
        }
        Ok(v)
    };

    let mut y = Vec::new();
    let mut w_labels = Vec::new();
    let mut x_rows: Vec<f64> = Vec::new();
    let mut z_rows: Vec<f64> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record?;
        let get = |col: usize, name: &str| -> Result<&str> {
            record
                .get(col)
                .ok_or_else(|| Error::invalid_data(format!("missing field '{name}' at row {row}")))
        };
        y.push(parse_f64(
            get(y_col, &schema.outcome)?,
            row,
            &schema.outcome,
        )?);
        let w_field = get(w_col, &schema.treatment)?.trim();
        let label: i64 = match w_field.parse::<i64>() {
            Ok(v) => v,
            Err(_) => {
                let v: f64 = w_field.parse().map_err(|_| {
                    Error::invalid_data(format!(
                        "treatment label '{w_field}' at row {row} is not an integer"
                    ))
                })?;
                if v.fract() != 0.0 || !v.is_finite() || v.abs() >= 9e15 {
                    return Err(Error::invalid_data(format!(
                        "treatment label '{w_field}' at row {row} is not an integer"
                    )));
                }
                v as i64
            }
        };
        w_labels.push(label);
        for (&c, name) in x_cols.iter().zip(&schema.confounders) {
            x_rows.push(parse_f64(get(c, name)?, row, name)?);
        }
        for (&c, name) in z_cols.iter().zip(&het_names) {
            z_rows.push(parse_f64(get(c, name)?, row, name)?);
        }
    }

    let n = y.len();
    if n == 0 {
        return Err(Error::invalid_data("CSV contains no data rows"));
    }
    let x = Array2::from_shape_vec((n, x_cols.len()), x_rows)
        .map_err(|e| Error::invalid_data(e.to_string()))?;
    let z = Array2::from_shape_vec((n, z_cols.len()), z_rows)
        .map_err(|e| Error::invalid_data(e.to_string()))?;
    let mut ds = Dataset::new(
        Array1::from_vec(y),
        &w_labels,
        x,
        schema.confounders.clone(),
        z,
        het_names,
    )?;
    ds.y_name = schema.outcome.clone();
    ds.w_name = schema.treatment.clone();
    Ok(ds)
}

/// Writes a dataset back to CSV with original treatment labels. Uses the
/// shortest round-trip float format, so `load_csv(save_csv(ds))` is
/// bit-identical for finite doubles.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let extra_z: Vec<usize> = (0..ds.z_names.len())
        .filter(|&j| !ds.x_names.contains(&ds.z_names[j]))
        .collect();
    let mut header = vec![ds.y_name.clone(), ds.w_name.clone()];
    header.extend(ds.x_names.iter().cloned());
    header.extend(extra_z.iter().map(|&j| ds.z_names[j].clone()));
    writer.write_record(&header)?;
    for i in 0..ds.n() {
        let mut record = vec![
            format!("{}", ds.y[i]),
            format!("{}", ds.arm_labels[ds.w[i]]),
        ];
        for j in 0..ds.x.ncols() {
            record.push(format!("{}", ds.x[[i, j]]));
        }
        for &j in &extra_z {
            record.push(format!("{}", ds.z[[i, j]]));
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Schema matching what [`save_csv`] wrote for this dataset.
pub fn schema_of(ds: &Dataset) -> ColumnSchema {
    ColumnSchema {
        outcome: ds.y_name.clone(),
        treatment: ds.w_name.clone(),
        confounders: ds.x_names.clone(),
        heterogeneity: ds.z_names.clone(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldAssignment {
    /// Fold id in 0..num_folds for each observation.
    pub fold: Vec<usize>,
    pub num_folds: usize,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn in_fold(&self, k: usize) -> Vec<usize> {
        (0..self.fold.len())
            .filter(|&i| self.fold[i] == k)
            .collect()
    }

    pub fn out_of_fold(&self, k: usize) -> Vec<usize> {
        (0..self.fold.len())
            .filter(|&i| self.fold[i] != k)
            .collect()
    }
}

/// Random fold assignment stratified by treatment arm.
///
/// Within each arm the observations are shuffled and dealt cyclically; the
/// starting fold rotates by each arm's remainder so that both per-arm and
/// total fold sizes differ by at most one.
pub fn assign_folds(ds: &Dataset, num_folds: usize, seed: u64) -> Result<FoldAssignment> {
    if num_folds < 2 {
        return Err(Error::invalid_param("need at least 2 folds"));
    }
    for (arm, &count) in ds.arm_counts.iter().enumerate() {
        if count < num_folds {
            return Err(Error::invalid_param(format!(
                "arm {} (label {}) has {} observations, fewer than {} folds",
                arm, ds.arm_labels[arm], count, num_folds
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x0f01d5]));
    let mut fold = vec![0usize; ds.n()];
    let mut start = 0usize;
    for arm in 0..ds.num_arms {
        let mut idx: Vec<usize> = (0..ds.n()).filter(|&i| ds.w[i] == arm).collect();
        idx.shuffle(&mut rng);
        for (j, &i) in idx.iter().enumerate() {
            fold[i] = (start + (j % num_folds)) % num_folds;
        }
        start = (start + idx.len() % num_folds) % num_folds;
    }
    Ok(FoldAssignment {
        fold,
        num_folds,
        seed,
    })
}

#[derive(Debug, Clone)]
pub struct Standardized {
    pub values: Array2<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    /// Columns with zero sample variance; left centered at zero.
    pub zero_variance: Vec<bool>,
}

/// Centers each column to mean 0 and scales to sample SD 1 (n-1 divisor).
/// Zero-variance columns are flagged and left as all zeros.
pub fn standardize(x: &ArrayView2<f64>) -> Standardized {
    let n = x.nrows();
    let p = x.ncols();
    let mut values = x.to_owned();
    let mut means = Vec::with_capacity(p);
    let mut sds = Vec::with_capacity(p);
    let mut zero_variance = Vec::with_capacity(p);
    for j in 0..p {
        let col: Vec<f64> = x.column(j).to_vec();
        let m = crate::stats::mean(&col);
        let sd = crate::stats::sample_sd(&col);
        means.push(m);
        sds.push(sd);
        let flag = sd == 0.0 || n < 2;
        zero_variance.push(flag);
        for i in 0..n {
            let centered = values[[i, j]] - m;
            values[[i, j]] = if flag { 0.0 } else { centered / sd };
        }
    }
    Standardized {
        values,
        means,
        sds,
        zero_variance,
    }
}
