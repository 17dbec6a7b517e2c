//! Small dense linear-algebra helpers on top of `nalgebra`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{dims, Error, Result};
use crate::math;
use crate::{Matrix, Vector};

/// Relative threshold on singular values used for numerical rank.
pub const RANK_REL_TOL: f64 = 1e-8;

/// Tolerance used for symmetry and semidefiniteness checks.
pub const PSD_TOL: f64 = 1e-10;

pub fn ensure_square(m: &Matrix, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(dims(format!("{what} must be square, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(m.nrows())
}

pub fn ensure_shape(m: &Matrix, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(dims(format!(
            "{what} must be {rows}x{cols}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

pub fn ensure_len(v: &Vector, len: usize, what: &str) -> Result<()> {
    if v.len() != len {
        return Err(dims(format!("{what} must have length {len}, got {}", v.len())));
    }
    Ok(())
}

pub fn all_finite(m: &Matrix) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(a: &Matrix) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| math::hypot(z.re, z.im))
        .fold(0.0, f64::max)
}

pub fn is_symmetric(m: &Matrix) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > PSD_TOL * scale {
                return false;
            }
        }
    }
    true
}

pub fn min_sym_eigenvalue(m: &Matrix) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn is_psd(m: &Matrix) -> bool {
    is_symmetric(m) && min_sym_eigenvalue(m) >= -PSD_TOL * m.amax().max(1.0)
}

pub fn is_pd(m: &Matrix) -> bool {
    is_symmetric(m) && min_sym_eigenvalue(m) > PSD_TOL * m.amax().max(1.0)
}

/// Numerical rank with threshold `RANK_REL_TOL * sigma_max`.
pub fn rank(m: &Matrix) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_REL_TOL * smax).count()
}

/// Stacks `[L; L A; ...; L A^{n-1}]`.
pub fn observability_matrix(l: &Matrix, a: &Matrix) -> Matrix {
    let n = a.nrows();
    let p = l.nrows();
    let mut out = Matrix::zeros(p * n, n);
    let mut block = l.clone();
    for k in 0..n {
        out.view_mut((k * p, 0), (p, n)).copy_from(&block);
        block = &block * a;
    }
    out
}

pub fn inverse(m: &Matrix, what: &'static str) -> Result<Matrix> {
    m.clone().try_inverse().ok_or(Error::SingularMatrix(what))
}

/// `(I - A)^{-1} B`, the steady-state map from a held reference to the state.
pub fn steady_state_gain(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    let lu = (Matrix::identity(n, n) - a).lu();
    lu.solve(b).ok_or(Error::SingularMatrix("I - A"))
}

/// Block-diagonal matrix assembled from square or rectangular blocks.
pub fn block_diag(blocks: &[Matrix]) -> Matrix {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Lower-triangular factor `F` with `F F^T = H` for a symmetric PSD `H`.
///
/// Diagonal inputs get an exact square root; otherwise a semidefinite Cholesky
/// pass is used in which non-positive pivots zero their column.
pub fn psd_factor(h: &Matrix) -> Result<Matrix> {
    let n = ensure_square(h, "covariance")?;
    if !is_psd(h) {
        return Err(Error::NonPsdInput("covariance"));
    }
    let mut f = Matrix::zeros(n, n);
    let diagonal = (0..n).all(|i| (0..n).all(|j| i == j || h[(i, j)] == 0.0));
    if diagonal {
        for i in 0..n {
            f[(i, i)] = math::sqrt(h[(i, i)].max(0.0));
        }
        return Ok(f);
    }
    let scale = h.amax().max(1e-300);
    for j in 0..n {
        let mut d = h[(j, j)];
        for k in 0..j {
            d -= f[(j, k)] * f[(j, k)];
        }
        if d <= 1e-13 * scale {
            continue;
        }
        let djj = math::sqrt(d);
        f[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = h[(i, j)];
            for k in 0..j {
                s -= f[(i, k)] * f[(j, k)];
            }
            f[(i, j)] = s / djj;
        }
    }
    Ok(f)
}

/// Log-determinant of a symmetric positive definite matrix via Cholesky.
pub fn log_det_pd(m: &Matrix, what: &'static str) -> Result<f64> {
    let chol = m.clone().cholesky().ok_or(Error::NonPdInput(what))?;
    let l = chol.l();
    Ok(2.0 * (0..l.nrows()).map(|i| math::ln(l[(i, i)])).sum::<f64>())
}

pub fn powers(a: &Matrix, count: usize) -> Vec<Matrix> {
    let n = a.nrows();
    let mut out = Vec::with_capacity(count);
    let mut p = Matrix::identity(n, n);
    for _ in 0..count {
        out.push(p.clone());
        p = a * &p;
    }
    out
}

pub fn vec_from(slice: &[f64]) -> Vector {
    Vector::from_column_slice(slice)
}

pub fn inf_norm(v: &Vector) -> f64 {
    v.amax()
}

pub fn euclid(v: &Vector) -> f64 {
    math::sqrt(v.dot(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn spectral_radius_of_rotation_scaled() {
        let a = dmatrix![0.0, -0.5; 0.5, 0.0];
        assert!((spectral_radius(&a) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn psd_factor_reconstructs() {
        let h = dmatrix![4.0, 2.0, 0.0; 2.0, 2.0, 0.0; 0.0, 0.0, 0.0];
        let f = psd_factor(&h).unwrap();
        assert!((&f * f.transpose() - &h).amax() < 1e-12);
    }

    #[test]
    fn rank_detects_deficiency() {
        let m = dmatrix![1.0, 2.0; 2.0, 4.0];
        assert_eq!(rank(&m), 1);
        assert_eq!(rank(&Matrix::identity(3, 3)), 3);
    }
}
