//! Natural cubic spline bases for the log-density of the mixing
//! distribution.
//!
//! Both constructions span natural cubic splines (linear beyond the
//! boundary) on `dim + 1` equally spaced knots, excluding the constant
//! direction, which the softmax normalization absorbs. They differ in the
//! parameterization, and therefore in the geometry of the `||alpha||`
//! penalty:
//!
//! - [`BasisKind::TruncatedPower`]: the textbook truncated-power natural
//!   basis, optionally column-standardized over the grid.
//! - [`BasisKind::OrthogonalNatural`]: cubic B-splines constrained to zero
//!   second derivative at the boundaries, centered, then orthogonalized by
//!   an SVD over the grid with singular-value column scales.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisKind {
    TruncatedPower { standardize: bool },
    OrthogonalNatural,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    pub kind: BasisKind,
    pub lo: f64,
    pub hi: f64,
    /// Number of basis functions (the spline order B).
    pub dim: usize,
}

impl SplineBasis {
    pub fn new(kind: BasisKind, lo: f64, hi: f64, dim: usize) -> Self {
        assert!(hi > lo, "degenerate basis domain");
        assert!(dim >= 2, "need at least two basis functions");
        SplineBasis { kind, lo, hi, dim }
    }

    /// Evaluate the basis on a grid, producing an `len(grid) x dim` matrix.
    /// Deterministic for a fixed grid.
    pub fn evaluate(&self, grid: &[f64]) -> DMatrix<f64> {
        match self.kind {
            BasisKind::TruncatedPower { standardize } => {
                let mut q = truncated_power(grid, self.lo, self.hi, self.dim);
                if standardize {
                    standardize_columns(&mut q);
                }
                q
            }
            BasisKind::OrthogonalNatural => orthogonal_natural(grid, self.lo, self.hi, self.dim),
        }
    }
}

/// Truncated-power natural cubic basis on `dim + 1` equally spaced knots:
/// the identity map plus `dim - 1` curvature terms, each linear beyond the
/// boundary knots.
fn truncated_power(grid: &[f64], lo: f64, hi: f64, dim: usize) -> DMatrix<f64> {
    let n_knots = dim + 1;
    let knots: Vec<f64> = (0..n_knots)
        .map(|i| lo + (hi - lo) * i as f64 / (n_knots - 1) as f64)
        .collect();
    let last = n_knots - 1;
    let cube = |v: f64| v * v * v;
    let d = |j: usize, x: f64| -> f64 {
        (cube((x - knots[j]).max(0.0)) - cube((x - knots[last]).max(0.0))) / (knots[last] - knots[j])
    };
    let mut q = DMatrix::zeros(grid.len(), dim);
    for (r, &x) in grid.iter().enumerate() {
        q[(r, 0)] = x;
        for j in 0..dim - 1 {
            q[(r, j + 1)] = d(j, x) - d(last - 1, x);
        }
    }
    q
}

fn standardize_columns(q: &mut DMatrix<f64>) {
    let rows = q.nrows() as f64;
    for c in 0..q.ncols() {
        let mean = q.column(c).sum() / rows;
        let var = q.column(c).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / rows;
        let sd = var.sqrt().max(1e-300);
        for r in 0..q.nrows() {
            q[(r, c)] = (q[(r, c)] - mean) / sd;
        }
    }
}

/// Cubic B-spline values at `x` for clamped knots `t` (Cox-de Boor).
fn bspline_row(t: &[f64], n_basis: usize, x: f64) -> Vec<f64> {
    let k = 3usize;
    let n_knots = t.len();
    let mut b = vec![0.0f64; n_knots - 1];
    // right-endpoint convention: the last basis function owns the endpoint
    if x >= t[n_knots - 1] {
        let mut out = vec![0.0; n_basis];
        out[n_basis - 1] = 1.0;
        return out;
    }
    for j in 0..n_knots - 1 {
        b[j] = if t[j] <= x && x < t[j + 1] { 1.0 } else { 0.0 };
    }
    for degree in 1..=k {
        for j in 0..n_knots - 1 - degree {
            let left = if t[j + degree] > t[j] {
                (x - t[j]) / (t[j + degree] - t[j]) * b[j]
            } else {
                0.0
            };
            let right = if t[j + degree + 1] > t[j + 1] {
                (t[j + degree + 1] - x) / (t[j + degree + 1] - t[j + 1]) * b[j + 1]
            } else {
                0.0
            };
            b[j] = left + right;
        }
    }
    b.truncate(n_basis);
    b
}

/// Natural-constrained, centered, SVD-orthogonalized basis with
/// singular-value column scales.
fn orthogonal_natural(grid: &[f64], lo: f64, hi: f64, dim: usize) -> DMatrix<f64> {
    let n_internal = dim - 1;
    let mut t = vec![lo; 4];
    for i in 1..=n_internal {
        t.push(lo + (hi - lo) * i as f64 / (n_internal + 1) as f64);
    }
    t.extend_from_slice(&[hi; 4]);
    let n_basis = n_internal + 4;

    let design = |points: &[f64]| -> DMatrix<f64> {
        let mut m = DMatrix::zeros(points.len(), n_basis);
        for (r, &x) in points.iter().enumerate() {
            let row = bspline_row(&t, n_basis, x);
            for (c, v) in row.iter().enumerate() {
                m[(r, c)] = *v;
            }
        }
        m
    };

    // second derivatives at the boundaries by central-ish differences
    let h = (hi - lo) * 1e-5;
    let pl = design(&[lo, lo + h, lo + 2.0 * h]);
    let pr = design(&[hi - 2.0 * h, hi - h, hi]);
    let mut constraints = DMatrix::zeros(2, n_basis);
    for c in 0..n_basis {
        constraints[(0, c)] = (pl[(0, c)] - 2.0 * pl[(1, c)] + pl[(2, c)]) / (h * h);
        constraints[(1, c)] = (pr[(0, c)] - 2.0 * pr[(1, c)] + pr[(2, c)]) / (h * h);
    }
    // nullspace of the constraints via the projector I - C'(CC')^{-1}C,
    // orthonormalized by Gram-Schmidt over projected coordinate vectors
    let cct = &constraints * constraints.transpose();
    let cct_inv = cct.try_inverse().expect("boundary constraints independent");
    let projector = DMatrix::identity(n_basis, n_basis)
        - constraints.transpose() * cct_inv * &constraints;
    let mut null_cols: Vec<nalgebra::DVector<f64>> = Vec::with_capacity(n_basis - 2);
    for j in 0..n_basis {
        let mut v = projector.column(j).into_owned();
        for accepted in &null_cols {
            let proj = accepted.dot(&v);
            v -= accepted * proj;
        }
        let norm = v.norm();
        if norm > 1e-8 {
            null_cols.push(v / norm);
        }
    }
    assert_eq!(null_cols.len(), n_basis - 2, "unexpected nullspace dimension");
    let mut null = DMatrix::zeros(n_basis, n_basis - 2);
    for (c, col) in null_cols.iter().enumerate() {
        null.set_column(c, col);
    }

    let mut projected = design(grid) * null;
    // remove the constant direction
    let rows = projected.nrows() as f64;
    for c in 0..projected.ncols() {
        let mean = projected.column(c).sum() / rows;
        for r in 0..projected.nrows() {
            projected[(r, c)] -= mean;
        }
    }
    let svd = projected.svd(true, false);
    let u = svd.u.expect("svd computed");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap()
    });
    let mut q = DMatrix::zeros(grid.len(), dim);
    for (c_out, &c_in) in order.iter().take(dim).enumerate() {
        let sigma = svd.singular_values[c_in];
        // canonical sign: largest-magnitude entry positive
        let mut flip = 1.0;
        let mut best = 0.0f64;
        for r in 0..u.nrows() {
            if u[(r, c_in)].abs() > best {
                best = u[(r, c_in)].abs();
                flip = if u[(r, c_in)] < 0.0 { -1.0 } else { 1.0 };
            }
        }
        for r in 0..grid.len() {
            q[(r, c_out)] = flip * sigma * u[(r, c_in)];
        }
    }
    q
}
