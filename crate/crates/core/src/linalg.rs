//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};

/// Tikhonov damping for the IK projection pseudo-inverse.
pub const PINV_DAMPING: f64 = 1e-8;

/// Damped right pseudo-inverse `Jᵀ(JJᵀ + δI)⁻¹`.
pub fn damped_pinv(j: &DMatrix<f64>, damping: f64) -> DMatrix<f64> {
    let rows = j.nrows();
    let mut jjt = j * j.transpose();
    for i in 0..rows {
        jjt[(i, i)] += damping;
    }
    match jjt.clone().cholesky() {
        Some(ch) => j.transpose() * ch.inverse(),
        // JJᵀ + δI is SPD in exact arithmetic; fall back to LU for roundoff
        None => j.transpose() * jjt.try_inverse().unwrap_or_else(|| DMatrix::zeros(rows, rows)),
    }
}

/// Relative singular-value cutoff for the SVD pseudo-inverse.
const PINV_RCOND: f64 = 1e-10;

/// Moore-Penrose pseudo-inverse through the SVD, truncating singular values
/// below `PINV_RCOND` times the largest one.
pub fn svd_pinv(j: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = j.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return DMatrix::zeros(j.ncols(), j.nrows());
    }
    svd.pseudo_inverse(smax * PINV_RCOND)
        .unwrap_or_else(|_| DMatrix::zeros(j.ncols(), j.nrows()))
}

/// Nullspace projector `I − J†J`.
///
/// Uses the undamped SVD pseudo-inverse so that `J (I − J†J)` vanishes to
/// roundoff; damping would leave a residual of order `δ/σ_min`.
pub fn nullspace_projector(j: &DMatrix<f64>) -> DMatrix<f64> {
    let n = j.ncols();
    DMatrix::identity(n, n) - svd_pinv(j) * j
}

/// Solve `L w = b` for lower-triangular `L`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = b.len();
    let mut w = DVector::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * w[k];
        }
        w[i] = s / l[(i, i)];
    }
    w
}

/// Solve `Lᵀ v = b` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = b.len();
    let mut v = DVector::zeros(n);
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[(k, i)] * v[k];
        }
        v[i] = s / l[(i, i)];
    }
    v
}

/// Number of free entries of a `d × d` lower-triangular matrix.
pub fn tril_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Row-major enumeration of the lower triangle: (0,0), (1,0), (1,1), ...
pub fn tril_indices(d: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..d).flat_map(|i| (0..=i).map(move |j| (i, j)))
}

/// Pack a lower-triangular factor with log-transformed diagonal.
pub fn pack_log_tril(l: &DMatrix<f64>) -> Vec<f64> {
    tril_indices(l.nrows())
        .map(|(i, j)| if i == j { l[(i, j)].ln() } else { l[(i, j)] })
        .collect()
}

pub fn unpack_log_tril(d: usize, raw: &[f64]) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(d, d);
    for ((i, j), v) in tril_indices(d).zip(raw) {
        l[(i, j)] = if i == j { v.exp() } else { *v };
    }
    l
}

/// `log |det L|` for a triangular factor with positive diagonal.
pub fn log_det_tril(l: &DMatrix<f64>) -> f64 {
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum()
}

/// Lower-triangular Cholesky factor, or `None` if not positive definite.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.l())
}

/// Symmetric eigenvalues.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
}
