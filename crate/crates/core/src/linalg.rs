//! Small dense linear-algebra helpers shared by the analysis modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// How numerical rank is decided from singular values.
///
/// By default a singular value counts when it exceeds
/// `σ_max · max(rows, cols) · ε`. An explicit absolute threshold replaces
/// that rule.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RankPolicy {
    pub absolute_tol: Option<f64>,
}

impl RankPolicy {
    pub fn with_tolerance(tol: f64) -> Self {
        Self {
            absolute_tol: Some(tol),
        }
    }

    pub fn threshold(&self, sigma_max: f64, rows: usize, cols: usize) -> f64 {
        match self.absolute_tol {
            Some(t) => t,
            None => sigma_max * rows.max(cols) as f64 * f64::EPSILON,
        }
    }
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

pub fn numeric_rank(m: &DMatrix<f64>, policy: &RankPolicy) -> usize {
    let sv = singular_values(m);
    let Some(&smax) = sv.first() else {
        return 0;
    };
    let tol = policy.threshold(smax, m.nrows(), m.ncols());
    sv.iter().filter(|&&s| s > tol).count()
}

/// Symmetric diagonal equilibration `D M D` with `D = diag(M)^{-1/2}`.
///
/// Returns the scaled matrix and the scale vector. Zero diagonal entries get
/// a unit scale (in a PSD matrix their rows and columns are zero).
pub fn equilibrate_symmetric(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let d = DVector::from_fn(m.nrows(), |i, _| {
        let v = m[(i, i)];
        if v > 0.0 {
            1.0 / v.sqrt()
        } else {
            1.0
        }
    });
    let scaled = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * d[i] * d[j]);
    (scaled, d)
}

/// Numerical rank of a symmetric positive-semidefinite matrix such as a FIM.
///
/// The matrix is equilibrated first; congruence by a nonsingular diagonal
/// leaves the rank unchanged but removes the unit-driven spread of the
/// diagonal, which otherwise squares into the condition number.
pub fn psd_rank(m: &DMatrix<f64>, policy: &RankPolicy) -> usize {
    let (scaled, _) = equilibrate_symmetric(m);
    numeric_rank(&scaled, policy)
}

/// Orthonormal basis of the numerical null space, one column per direction.
pub fn null_space(m: &DMatrix<f64>, policy: &RankPolicy) -> DMatrix<f64> {
    let n = m.ncols();
    if m.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    // SVD of the Gram matrix keeps V square even for wide inputs.
    let gram = m.transpose() * m;
    let svd = gram.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let rank = numeric_rank(m, policy);
    let cols: Vec<DVector<f64>> = order[rank..]
        .iter()
        .map(|&i| v_t.row(i).transpose())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Cholesky factor of a symmetric positive-definite matrix, or
/// `InvalidConfig` naming `what`.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidConfig(format!("{what} is not square")));
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-12 * m.abs().max().max(1.0) {
        return Err(Error::InvalidConfig(format!("{what} is not symmetric")));
    }
    Cholesky::new(m.clone())
        .ok_or_else(|| Error::InvalidConfig(format!("{what} is not positive definite")))
}

/// Block-diagonal concatenation.
pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}
