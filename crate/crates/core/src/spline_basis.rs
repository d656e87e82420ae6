//! B-spline basis for the group mean functions.
//!
//! Knots are padded by repeating each boundary knot `degree + 1` times, so
//! the basis is a partition of unity on `[lo, hi]` and the first (last)
//! function equals one at `lo` (`hi`). Evaluation outside the boundary
//! clamps to the nearest boundary knot.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::quantile_sorted;

/// Knot layout and degree of a clamped B-spline basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub degree: usize,
    pub interior_knots: Vec<f64>,
    pub boundary_knots: (f64, f64),
}

/// Degree and interior knot count; knots themselves are placed from data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisConfig {
    pub degree: usize,
    pub n_interior: usize,
}

impl BasisConfig {
    pub const fn linear() -> Self {
        BasisConfig {
            degree: 1,
            n_interior: 0,
        }
    }

    pub const fn cubic() -> Self {
        BasisConfig {
            degree: 3,
            n_interior: 0,
        }
    }

    pub const fn cubic_spline(n_interior: usize) -> Self {
        BasisConfig {
            degree: 3,
            n_interior,
        }
    }

    pub fn build(&self, values: &[f64]) -> Result<BasisSpec> {
        BasisSpec::from_values(values, self.degree, self.n_interior)
    }
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig::cubic_spline(3)
    }
}

/// Cubic basis on the range of `values` with `n_interior` knots at equally
/// spaced empirical quantiles.
pub fn make_basis_spec(values: &[f64], n_interior: usize) -> Result<BasisSpec> {
    BasisSpec::from_values(values, 3, n_interior)
}

impl BasisSpec {
    /// Explicit construction. Interior knots must lie strictly inside the
    /// boundary and be non-decreasing.
    pub fn new(degree: usize, interior_knots: Vec<f64>, boundary_knots: (f64, f64)) -> Result<Self> {
        let (lo, hi) = boundary_knots;
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(Error::DegenerateRange);
        }
        if degree == 0 {
            return Err(Error::InvalidInput("spline degree must be at least 1".into()));
        }
        let inside = interior_knots.iter().all(|&k| k > lo && k < hi);
        let sorted = interior_knots.windows(2).all(|w| w[0] <= w[1]);
        if !inside || !sorted {
            return Err(Error::InvalidInput(
                "interior knots must be non-decreasing and strictly inside the boundary".into(),
            ));
        }
        Ok(BasisSpec {
            degree,
            interior_knots,
            boundary_knots,
        })
    }

    pub fn from_values(values: &[f64], degree: usize, n_interior: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("surrogate values must be finite".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let lo = sorted[0];
        let hi = sorted[sorted.len() - 1];
        if lo == hi {
            return Err(Error::DegenerateRange);
        }
        let mut knots: Vec<f64> = Vec::with_capacity(n_interior);
        for i in 1..=n_interior {
            let q = quantile_sorted(&sorted, i as f64 / (n_interior + 1) as f64);
            if q > lo && q < hi && knots.last().is_none_or(|&last| q > last) {
                knots.push(q);
            }
        }
        BasisSpec::new(degree, knots, (lo, hi))
    }

    /// Basis dimension L.
    pub fn n_basis(&self) -> usize {
        self.interior_knots.len() + self.degree + 1
    }

    fn padded_knots(&self) -> Vec<f64> {
        let (lo, hi) = self.boundary_knots;
        let p = self.degree;
        let mut t = Vec::with_capacity(self.n_basis() + p + 1);
        t.extend(std::iter::repeat_n(lo, p + 1));
        t.extend_from_slice(&self.interior_knots);
        t.extend(std::iter::repeat_n(hi, p + 1));
        t
    }

    /// Writes the basis at `s` into `out` (length L).
    pub fn eval_into(&self, s: f64, out: &mut [f64]) {
        let n_basis = self.n_basis();
        debug_assert_eq!(out.len(), n_basis);
        out.iter_mut().for_each(|v| *v = 0.0);
        let p = self.degree;
        let t = self.padded_knots();
        let (lo, hi) = self.boundary_knots;
        let x = s.clamp(lo, hi);

        // knot span: t[span] <= x < t[span + 1], with x == hi mapped to the last non-empty span
        let span = if x >= hi {
            n_basis - 1
        } else {
            let mut span = p;
            while span < n_basis - 1 && t[span + 1] <= x {
                span += 1;
            }
            span
        };

        // Cox–de Boor, triangular form over the p + 1 non-zero functions
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        for (k, v) in n.into_iter().enumerate() {
            out[span - p + k] = v;
        }
    }
}

pub fn eval_basis(spec: &BasisSpec, s: f64) -> Vec<f64> {
    let mut out = vec![0.0; spec.n_basis()];
    spec.eval_into(s, &mut out);
    out
}

/// Row i holds the basis evaluated at `s_vec[i]`.
pub fn design_matrix(spec: &BasisSpec, s_vec: &[f64]) -> DMatrix<f64> {
    let l = spec.n_basis();
    let mut m = DMatrix::zeros(s_vec.len(), l);
    let mut row = vec![0.0; l];
    for (i, &s) in s_vec.iter().enumerate() {
        spec.eval_into(s, &mut row);
        for (j, &v) in row.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    m
}
