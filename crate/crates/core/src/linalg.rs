//! Small dense linear-algebra helpers shared by the factorization and
//! least-squares code paths. Decompositions go through `nalgebra`; storage
//! everywhere else is `ndarray`.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Ridge jitter used wherever a least-squares problem may be rank deficient.
pub const LSTSQ_JITTER: f64 = 1e-10;

pub fn to_nalgebra(a: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn from_nalgebra(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

pub fn frobenius_sq(a: ArrayView2<'_, f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

/// Solves `argmin_X ||B - X A||_F^2 + ridge ||X||_F^2`, i.e.
/// `X = B A^T (A A^T + ridge I)^{-1}`, for `B` (m x k) and `A` (l x k).
pub fn ridge_right_solve(
    b: ArrayView2<'_, f64>,
    a: ArrayView2<'_, f64>,
    ridge: f64,
) -> Result<Array2<f64>> {
    if b.ncols() != a.ncols() {
        return Err(Error::shape(
            "least-squares right-hand side",
            format!("{} columns", a.ncols()),
            format!("{} columns", b.ncols()),
        ));
    }
    let mut gram = a.dot(&a.t());
    for i in 0..gram.nrows() {
        gram[[i, i]] += ridge;
    }
    let rhs = b.dot(&a.t());
    // X gram = rhs  <=>  gram X^T = rhs^T (gram is symmetric)
    let solved = spd_solve(gram.view(), rhs.t())?;
    Ok(solved.reversed_axes())
}

/// Solves `S X = R` for symmetric positive definite `S`.
pub fn spd_solve(s: ArrayView2<'_, f64>, r: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let chol = to_nalgebra(s)
        .cholesky()
        .ok_or_else(|| Error::Singular("cholesky factorization".into()))?;
    let x = chol.solve(&to_nalgebra(r));
    Ok(from_nalgebra(&x))
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky_lower(s: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let chol = to_nalgebra(s)
        .cholesky()
        .ok_or_else(|| Error::Singular("cholesky factorization".into()))?;
    Ok(from_nalgebra(&chol.l()))
}

/// Singular values in non-increasing order.
pub fn singular_values(a: ArrayView2<'_, f64>) -> Vec<f64> {
    let mut s: Vec<f64> = to_nalgebra(a).singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

pub fn nuclear_norm(a: ArrayView2<'_, f64>) -> f64 {
    singular_values(a).iter().sum()
}

/// Stacks matrices with a shared column count on top of each other.
pub fn vstack(blocks: &[ArrayView2<'_, f64>]) -> Result<Array2<f64>> {
    ndarray::concatenate(Axis(0), blocks)
        .map_err(|e| Error::InvalidInput(format!("cannot stack matrices: {e}")))
}

pub fn row_l1(a: ArrayView2<'_, f64>) -> Array1<f64> {
    a.map_axis(Axis(1), |r| r.iter().map(|v| v.abs()).sum())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some(dot / (na * nb))
}
