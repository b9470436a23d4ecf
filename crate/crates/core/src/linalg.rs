//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Real};

/// Relative jitter added before inverting a covariance: `1e-9 * trace / d`.
pub const JITTER_SCALE: f64 = 1e-9;

/// `(X + X^T) / 2`.
pub fn symmetrize<T: Real>(x: &DMatrix<T>) -> DMatrix<T> {
    (x + x.transpose()) * lit::<T>(0.5)
}

/// Adds `scale * trace / d` to the diagonal.
pub fn add_jitter<T: Real>(x: &DMatrix<T>, scale: T) -> DMatrix<T> {
    let d = x.nrows();
    if d == 0 {
        return x.clone();
    }
    let mut tr = x.trace() / nalgebra::convert::<f64, T>(d as f64);
    if tr <= T::zero() {
        tr = T::one();
    }
    let mut out = x.clone();
    for i in 0..d {
        out[(i, i)] += scale * tr;
    }
    out
}

pub fn check_square<T: Real>(x: &DMatrix<T>, n: usize, what: &str) -> Result<()> {
    if x.nrows() != n || x.ncols() != n {
        return Err(Error::dim(
            what,
            format!("{n}x{n}"),
            format!("{}x{}", x.nrows(), x.ncols()),
        ));
    }
    Ok(())
}

pub fn check_shape<T: Real>(x: &DMatrix<T>, rows: usize, cols: usize, what: &str) -> Result<()> {
    if x.nrows() != rows || x.ncols() != cols {
        return Err(Error::dim(
            what,
            format!("{rows}x{cols}"),
            format!("{}x{}", x.nrows(), x.ncols()),
        ));
    }
    Ok(())
}

pub fn check_len<T: Real>(x: &DVector<T>, n: usize, what: &str) -> Result<()> {
    if x.len() != n {
        return Err(Error::dim(what, n, x.len()));
    }
    Ok(())
}

/// Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky<T: Real>(x: &DMatrix<T>, what: &str) -> Result<Cholesky<T, nalgebra::Dyn>> {
    Cholesky::new(symmetrize(x)).ok_or_else(|| Error::not_pd(what))
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse<T: Real>(x: &DMatrix<T>, what: &str) -> Result<DMatrix<T>> {
    Ok(symmetrize(&cholesky(x, what)?.inverse()))
}

/// `log |X|` for symmetric positive-definite `X`.
pub fn spd_log_det<T: Real>(x: &DMatrix<T>, what: &str) -> Result<T> {
    let chol = cholesky(x, what)?;
    let l = chol.l_dirty();
    let mut acc = T::zero();
    for i in 0..x.nrows() {
        acc += l[(i, i)].ln();
    }
    Ok(acc * lit::<T>(2.0))
}

/// Smallest eigenvalue of the symmetric part of `x`.
pub fn min_eigenvalue<T: Real>(x: &DMatrix<T>) -> T {
    if x.nrows() == 0 {
        return T::zero();
    }
    let eig = SymmetricEigen::new(symmetrize(x));
    eig.eigenvalues
        .iter()
        .copied()
        .fold(T::max_value().unwrap(), |a, b| a.min(b))
}

/// Largest eigenvalue of the symmetric part of `x`.
pub fn max_eigenvalue<T: Real>(x: &DMatrix<T>) -> T {
    if x.nrows() == 0 {
        return T::zero();
    }
    let eig = SymmetricEigen::new(symmetrize(x));
    eig.eigenvalues
        .iter()
        .copied()
        .fold(T::min_value().unwrap(), |a, b| a.max(b))
}

/// Clamps the spectrum of a symmetric matrix from below.
pub fn floor_eigenvalues<T: Real>(x: &DMatrix<T>, floor: T) -> DMatrix<T> {
    let eig = SymmetricEigen::new(symmetrize(x));
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()))
}

/// Smallest of the `ncols` singular values; a wide matrix has a zero one, so
/// this is a column-rank measure.
pub fn min_singular_value<T: Real>(x: &DMatrix<T>) -> T {
    if x.ncols() > x.nrows() {
        return T::zero();
    }
    let sv = x.clone().singular_values();
    sv.iter()
        .copied()
        .fold(T::max_value().unwrap(), |a, b| a.min(b))
}

/// Max-abs entry, as `f64` for reporting.
pub fn max_abs<T: Real>(x: &DMatrix<T>) -> f64 {
    x.iter().map(|v| to_f64(v.abs())).fold(0.0, f64::max)
}

/// Max-abs asymmetry `|X - X^T|`.
pub fn asymmetry<T: Real>(x: &DMatrix<T>) -> f64 {
    max_abs(&(x - x.transpose()))
}

/// Column-major `vec(X)`.
pub fn vec_of<T: Real>(x: &DMatrix<T>) -> DVector<T> {
    DVector::from_column_slice(x.as_slice())
}

/// Inverse of [`vec_of`].
pub fn unvec<T: Real>(v: &[T], rows: usize, cols: usize) -> DMatrix<T> {
    DMatrix::from_column_slice(rows, cols, v)
}

/// Builds a matrix from row-major nested rows.
pub fn from_rows<T: Real>(rows: &[Vec<f64>]) -> Result<DMatrix<T>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::InvalidArgument("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| lit(rows[i][j])))
}

/// Row-major nested rows of a matrix.
pub fn to_rows<T: Real>(x: &DMatrix<T>) -> Vec<Vec<f64>> {
    (0..x.nrows())
        .map(|i| (0..x.ncols()).map(|j| to_f64(x[(i, j)])).collect())
        .collect()
}
