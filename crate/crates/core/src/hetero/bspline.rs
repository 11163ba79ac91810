//! Clamped B-spline basis with the Cox-de Boor recursion.
//!
//! The knot vector repeats each boundary degree+1 times, so the basis spans
//! constants (and polynomials up to the degree) on [lo, hi]. Evaluation
//! clamps its argument into the domain and treats the right boundary as
//! closed, so the basis row at hi is well defined.

use crate::error::{Error, Result};
use crate::stats::quantile_sorted;
use ndarray::Array2;

#[derive(Debug, Clone)]
pub struct BSplineBasis {
    degree: usize,
    /// Full clamped knot vector, non-decreasing.
    knots: Vec<f64>,
}

impl BSplineBasis {
    /// Basis on [lo, hi] with the given interior knots (any order, but each
    /// strictly inside the domain).
    pub fn new(lo: f64, hi: f64, interior: &[f64], degree: usize) -> Result<BSplineBasis> {
        if !(lo.is_finite() && hi.is_finite()) || !(lo < hi) {
            return Err(Error::invalid_param(format!(
                "spline domain [{lo}, {hi}] is not a finite interval"
            )));
        }
        if degree == 0 {
            return Err(Error::invalid_param("spline degree must be at least 1"));
        }
        if let Some(&bad) = interior.iter().find(|&&k| !(k > lo && k < hi)) {
            return Err(Error::invalid_param(format!(
                "interior knot {bad} outside ({lo}, {hi})"
            )));
        }
        let mut inner: Vec<f64> = interior.to_vec();
        inner.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut knots = Vec::with_capacity(inner.len() + 2 * (degree + 1));
        knots.extend(std::iter::repeat(lo).take(degree + 1));
        knots.extend(inner);
        knots.extend(std::iter::repeat(hi).take(degree + 1));
        Ok(BSplineBasis { degree, knots })
    }

    /// Basis over the observed range of `z` with `num_interior` knots placed
    /// at equally spaced quantiles. Quantiles that collide with a boundary
    /// (possible under heavy ties) are dropped rather than kept as
    /// zero-width spans.
    pub fn from_data(z: &[f64], num_interior: usize, degree: usize) -> Result<BSplineBasis> {
        if z.len() < 2 {
            return Err(Error::invalid_data(
                "need at least 2 points to place a spline",
            ));
        }
        let lo = z.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(lo < hi) {
            return Err(Error::invalid_data(
                "moderator is constant; spline basis undefined",
            ));
        }
        let mut sorted = z.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut interior = Vec::with_capacity(num_interior);
        for j in 1..=num_interior {
            let q = quantile_sorted(&sorted, j as f64 / (num_interior + 1) as f64);
            if q > lo && q < hi {
                interior.push(q);
            }
        }
        BSplineBasis::new(lo, hi, &interior, degree)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn num_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0], *self.knots.last().unwrap())
    }

    /// Index i with knots[i] <= z < knots[i+1] among the non-degenerate
    /// spans; the last span absorbs z at the right boundary.
    fn find_span(&self, z: f64) -> usize {
        let d = self.degree;
        let n = self.num_basis();
        if z >= self.knots[n] {
            let mut i = n - 1;
            while i > d && self.knots[i] == self.knots[i + 1] {
                i -= 1;
            }
            return i;
        }
        let (mut lo, mut hi) = (d, n);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if z < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// All basis values at z, clamping z into the domain first.
    pub fn eval(&self, z: f64) -> Vec<f64> {
        let (lo, hi) = self.domain();
        let zc = z.clamp(lo, hi);
        let span = self.find_span(zc);
        let d = self.degree;

        // Triangular Cox-de Boor scheme over the d+1 functions that are
        // nonzero on this span.
        let mut nb = vec![0.0; d + 1];
        nb[0] = 1.0;
        let mut left = vec![0.0; d + 1];
        let mut right = vec![0.0; d + 1];
        for j in 1..=d {
            left[j] = zc - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - zc;
            let mut saved = 0.0;
            for r in 0..j {
                let den = right[r + 1] + left[j - r];
                let temp = if den != 0.0 { nb[r] / den } else { 0.0 };
                nb[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            nb[j] = saved;
        }

        let mut out = vec![0.0; self.num_basis()];
        for (j, &v) in nb.iter().enumerate() {
            out[span - d + j] = v;
        }
        out
    }

    /// Design matrix with one row per evaluation point.
    pub fn design(&self, z: &[f64]) -> Array2<f64> {
        let mut m = Array2::<f64>::zeros((z.len(), self.num_basis()));
        for (i, &zi) in z.iter().enumerate() {
            for (j, v) in self.eval(zi).into_iter().enumerate() {
                m[[i, j]] = v;
            }
        }
        m
    }

    pub fn column_names(&self) -> Vec<String> {
        (0..self.num_basis()).map(|j| format!("b{j}")).collect()
    }
}
