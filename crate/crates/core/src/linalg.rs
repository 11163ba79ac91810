//! Dense least squares for small design matrices.
//!
//! The designs that arrive here are tiny (a handful of group dummies or a
//! B-spline basis), so a modified Gram-Schmidt QR plus explicit triangular
//! inverses is both adequate and easy to keep deterministic.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Relative tolerance below which a column is declared collinear with the
/// columns to its left.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub beta: Array1<f64>,
    pub fitted: Array1<f64>,
    pub residuals: Array1<f64>,
    /// (X'X)^{-1}, the bread of the sandwich covariance.
    pub xtx_inv: Array2<f64>,
}

/// Ordinary least squares via modified Gram-Schmidt QR.
///
/// `names` labels the columns of `x` for the rank-deficiency error; pass
/// generated names if the caller has none.
pub fn ols(x: ArrayView2<f64>, y: ArrayView1<f64>, names: &[String]) -> Result<OlsFit> {
    let n = x.nrows();
    let k = x.ncols();
    if n != y.len() {
        return Err(Error::invalid_data(format!(
            "design has {n} rows but response has {} entries",
            y.len()
        )));
    }
    if n < k {
        return Err(Error::invalid_data(format!(
            "fewer observations ({n}) than regressors ({k})"
        )));
    }

    // Q is built column by column; R is upper triangular.
    let mut q = x.to_owned();
    let mut r = Array2::<f64>::zeros((k, k));
    let mut collinear: Vec<String> = Vec::new();
    for j in 0..k {
        let norm_before = q.column(j).dot(&q.column(j)).sqrt();
        for i in 0..j {
            let rij = q.column(i).dot(&q.column(j));
            r[[i, j]] = rij;
            let qi = q.column(i).to_owned();
            q.column_mut(j).zip_mut_with(&qi, |a, &b| *a -= rij * b);
        }
        let rjj = q.column(j).dot(&q.column(j)).sqrt();
        if rjj <= RANK_TOL * norm_before.max(1.0) {
            let name = names
                .get(j)
                .cloned()
                .unwrap_or_else(|| format!("column {j}"));
            collinear.push(name);
            continue;
        }
        r[[j, j]] = rjj;
        q.column_mut(j).mapv_inplace(|v| v / rjj);
    }
    if !collinear.is_empty() {
        return Err(Error::RankDeficient(collinear));
    }

    // beta = R^{-1} Q'y by back substitution.
    let qty: Vec<f64> = (0..k).map(|i| q.column(i).dot(&y)).collect();
    let mut beta = Array1::<f64>::zeros(k);
    for i in (0..k).rev() {
        let mut s = qty[i];
        for j in (i + 1)..k {
            s -= r[[i, j]] * beta[j];
        }
        beta[i] = s / r[[i, i]];
    }

    let fitted = x.dot(&beta);
    let residuals = &y.to_owned() - &fitted;

    // (X'X)^{-1} = R^{-1} R^{-T}.
    let rinv = upper_triangular_inverse(&r);
    let xtx_inv = rinv.dot(&rinv.t());

    Ok(OlsFit {
        beta,
        fitted,
        residuals,
        xtx_inv,
    })
}

fn upper_triangular_inverse(r: &Array2<f64>) -> Array2<f64> {
    let k = r.nrows();
    let mut inv = Array2::<f64>::zeros((k, k));
    for col in 0..k {
        // Solve R v = e_col.
        for i in (0..=col).rev() {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for j in (i + 1)..=col {
                s -= r[[i, j]] * inv[[j, col]];
            }
            inv[[i, col]] = s / r[[i, i]];
        }
    }
    inv
}

/// HC1 heteroskedasticity-robust covariance of OLS coefficients:
/// n/(n-k) * (X'X)^{-1} X' diag(e^2) X (X'X)^{-1}.
pub fn hc1_covariance(x: ArrayView2<f64>, fit: &OlsFit) -> Array2<f64> {
    let n = x.nrows();
    let k = x.ncols();
    let mut meat = Array2::<f64>::zeros((k, k));
    for i in 0..n {
        let e2 = fit.residuals[i] * fit.residuals[i];
        let row = x.row(i);
        for a in 0..k {
            let ra = e2 * row[a];
            for b in a..k {
                meat[[a, b]] += ra * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            meat[[a, b]] = meat[[b, a]];
        }
    }
    let scale = n as f64 / (n - k) as f64;
    let v = fit.xtx_inv.dot(&meat).dot(&fit.xtx_inv);
    v.mapv(|e| e * scale)
}

/// Inverts a small symmetric positive definite matrix by Gauss-Jordan with
/// partial pivoting. Errors if a pivot collapses.
pub fn invert_small(a: &Array2<f64>) -> Result<Array2<f64>> {
    let k = a.nrows();
    if a.ncols() != k {
        return Err(Error::invalid_data("matrix to invert is not square"));
    }
    let mut m = a.to_owned();
    let mut inv = Array2::<f64>::eye(k);
    for col in 0..k {
        let mut pivot = col;
        for row in (col + 1)..k {
            if m[[row, col]].abs() > m[[pivot, col]].abs() {
                pivot = row;
            }
        }
        if m[[pivot, col]].abs() < 1e-300 {
            return Err(Error::invalid_data(
                "singular matrix in covariance inversion",
            ));
        }
        if pivot != col {
            for j in 0..k {
                m.swap([pivot, j], [col, j]);
                inv.swap([pivot, j], [col, j]);
            }
        }
        let d = m[[col, col]];
        for j in 0..k {
            m[[col, j]] /= d;
            inv[[col, j]] /= d;
        }
        for row in 0..k {
            if row == col {
                continue;
            }
            let f = m[[row, col]];
            if f == 0.0 {
                continue;
            }
            for j in 0..k {
                let mcj = m[[col, j]];
                let icj = inv[[col, j]];
                m[[row, j]] -= f * mcj;
                inv[[row, j]] -= f * icj;
            }
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    #[test]
    fn recovers_exact_linear_coefficients() {
        // y = 2 + 3 x with no noise.
        let n = 10;
        let mut x = Array2::<f64>::ones((n, 2));
        let mut y = Array1::<f64>::zeros(n);
        for i in 0..n {
            x[[i, 1]] = i as f64;
            y[i] = 2.0 + 3.0 * i as f64;
        }
        let fit = ols(x.view(), y.view(), &["const".into(), "x".into()]).unwrap();
        assert_abs_diff_eq!(fit.beta[0], 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.beta[1], 3.0, epsilon = 1e-10);
    }

    #[test]
    fn reports_collinear_column_by_name() {
        // Third column duplicates the second.
        let x = array![
            [1.0, 1.0, 1.0],
            [1.0, 2.0, 2.0],
            [1.0, 3.0, 3.0],
            [1.0, 4.0, 4.0]
        ];
        let y = array![1.0, 2.0, 3.0, 4.0];
        let names = vec!["const".to_string(), "a".to_string(), "a_copy".to_string()];
        match ols(x.view(), y.view(), &names) {
            Err(Error::RankDeficient(cols)) => assert_eq!(cols, vec!["a_copy".to_string()]),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn xtx_inv_matches_direct_inverse() {
        let x = array![[1.0, 0.5], [1.0, -1.0], [1.0, 2.0], [1.0, 0.0]];
        let y = array![1.0, 0.0, 2.0, 1.0];
        let fit = ols(x.view(), y.view(), &["c".into(), "x".into()]).unwrap();
        let xtx = x.t().dot(&x);
        let direct = invert_small(&xtx).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(fit.xtx_inv[[i, j]], direct[[i, j]], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn invert_small_roundtrip() {
        let a = array![[4.0, 1.0, 0.2], [1.0, 3.0, -0.5], [0.2, -0.5, 2.0]];
        let inv = invert_small(&a).unwrap();
        let prod = a.dot(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(prod[[i, j]], expect, epsilon = 1e-10);
            }
        }
    }
}
