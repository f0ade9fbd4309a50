//! Small dense linear-algebra helpers shared by the analysis and synthesis code.
//!
//! Everything here works on `nalgebra` dynamic matrices; the problem sizes are
//! desk-scale (tens of states, a handful of agents).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Relative PSD tolerance: eigenvalues down to `-PSD_REL_TOL * (1 + max|λ|)` pass.
pub const PSD_REL_TOL: f64 = 1e-9;

/// Singular values below `RANK_REL_TOL * σ_max` count as zero in rank tests.
pub const RANK_REL_TOL: f64 = 1e-10;

/// Eigenvalues below `PINV_REL_TOL * max|λ|` are dropped by [`pinv_symmetric`].
pub const PINV_REL_TOL: f64 = 1e-12;

/// `(X + Xᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// In-place variant of [`symmetrize`].
pub fn symmetrize_mut(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Eigenvalues of the symmetric part of a square matrix, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// True when the matrix is square and its symmetric part is PSD within
/// [`PSD_REL_TOL`]. Asymmetry itself is checked by [`is_symmetric`].
pub fn is_psd(m: &DMatrix<f64>) -> bool {
    if !m.is_square() {
        return false;
    }
    let ev = symmetric_eigenvalues(m);
    let scale = ev.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    ev.first().is_none_or(|&min| min >= -PSD_REL_TOL * (1.0 + scale))
}

/// Symmetry within the PSD tolerance, relative to the largest entry.
pub fn is_symmetric(m: &DMatrix<f64>) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax();
    let asym = (m - m.transpose()).amax();
    asym <= PSD_REL_TOL * (1.0 + scale)
}

/// True when the matrix is symmetric and every eigenvalue is strictly positive
/// (relative to its largest eigenvalue).
pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    if !is_symmetric(m) || m.nrows() == 0 {
        return false;
    }
    let ev = symmetric_eigenvalues(m);
    let max = ev.last().copied().unwrap_or(0.0);
    ev[0] > PSD_REL_TOL * max.abs() && ev[0] > 0.0
}

/// Numerical rank from the SVD with relative threshold [`RANK_REL_TOL`].
pub fn rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    if max <= 0.0 || !max.is_finite() {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_REL_TOL * max).count()
}

/// Moore–Penrose pseudoinverse of a symmetric matrix through its eigendecomposition.
///
/// The input is symmetrized first. Eigenvalues with `|λ| <= rel_tol * max|λ|`
/// are treated as zero.
pub fn pinv_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let max = eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if max == 0.0 {
        return DMatrix::zeros(n, n);
    }
    let cutoff = rel_tol * max;
    let inv = eig
        .eigenvalues
        .map(|l| if l.abs() > cutoff { 1.0 / l } else { 0.0 });
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= inv[j];
    }
    symmetrize(&(scaled * v.transpose()))
}

/// `b · pinv(m)` for symmetric `m`, same cutoff as [`pinv_symmetric`].
///
/// Applies the eigenvectors to `b` before scaling by the inverse eigenvalues
/// instead of forming the pseudoinverse, which keeps `(b·m⁺)·m ≈ b` accurate
/// when `m` is badly conditioned.
pub fn right_pinv_solve(b: &DMatrix<f64>, m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = m.nrows();
    assert_eq!(b.ncols(), n, "right_pinv_solve: column mismatch");
    if n == 0 {
        return DMatrix::zeros(b.nrows(), 0);
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let max = eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if max == 0.0 {
        return DMatrix::zeros(b.nrows(), n);
    }
    let cutoff = rel_tol * max;
    let mut a = b * &eig.eigenvectors;
    for (j, mut col) in a.column_iter_mut().enumerate() {
        let l = eig.eigenvalues[j];
        col *= if l.abs() > cutoff { 1.0 / l } else { 0.0 };
    }
    a * eig.eigenvectors.transpose()
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    assert!(m.is_square(), "spectral radius needs a square matrix");
    if m.nrows() == 0 {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

/// Factor `L` with `L Lᵀ = cov` for Gaussian sampling.
///
/// Uses Cholesky when it succeeds, otherwise the symmetric eigendecomposition
/// with negative eigenvalues clamped to zero (covers singular priors such as
/// `P0 = 0`).
pub fn covariance_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrize(cov);
    if let Some(ch) = sym.clone().cholesky() {
        return ch.l();
    }
    let eig = SymmetricEigen::new(sym);
    let mut l = eig.eigenvectors.clone();
    for (j, mut col) in l.column_iter_mut().enumerate() {
        col *= eig.eigenvalues[j].max(0.0).sqrt();
    }
    l
}

/// Nearest PSD matrix in Frobenius norm: negative eigenvalues of the
/// symmetric part set to zero. Returns the symmetric part unchanged when it
/// is already PSD.
pub fn clamp_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = symmetrize(m);
    if sym.nrows() == 0 || sym.clone().cholesky().is_some() {
        return sym;
    }
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return sym;
    }
    let lambda = eig.eigenvalues.map(|v| v.max(0.0));
    let v = &eig.eigenvectors;
    symmetrize(&(v * DMatrix::from_diagonal(&lambda) * v.transpose()))
}

/// Vertically stack matrices that share a column count.
pub fn vstack(blocks: &[DMatrix<f64>], ncols: usize) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, ncols);
    let mut r = 0;
    for b in blocks {
        debug_assert_eq!(b.ncols(), ncols);
        out.view_mut((r, 0), (b.nrows(), ncols)).copy_from(b);
        r += b.nrows();
    }
    out
}

/// Relative Frobenius distance `‖a − b‖ / ‖b‖`, falling back to the absolute
/// distance when `b` is zero.
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Serde adapter storing a matrix as row-major nested lists.
pub mod rows {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Serde adapter for an optional row-major matrix.
pub mod opt_rows {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
        m.as_ref().map(to_rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DMatrix<f64>>, D::Error> {
        let rows: Option<Vec<Vec<f64>>> = Option::deserialize(d)?;
        rows.map(|r| from_rows(&r).map_err(serde::de::Error::custom))
            .transpose()
    }
}

/// Serde adapter for a list of row-major matrices.
pub mod vec_rows {
    use super::*;

    pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        ms.iter().map(to_rows).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        let all: Vec<Vec<Vec<f64>>> = Vec::deserialize(d)?;
        all.iter()
            .map(|r| from_rows(r).map_err(serde::de::Error::custom))
            .collect()
    }
}

/// Serde adapter storing a vector as a plain list.
pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        let v: Vec<f64> = Vec::deserialize(d)?;
        Ok(DVector::from_vec(v))
    }
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Build a matrix from row-major nested lists. An empty list gives a 0×0 matrix.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(format!(
            "ragged matrix: row {} has {} entries, expected {}",
            i,
            r.len(),
            ncols
        ));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}
