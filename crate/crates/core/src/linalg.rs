//! Thin dense linear-algebra layer over `faer`.
//!
//! Vectors are plain `Vec<f64>`; matrices are `faer::Mat<f64>`. Solvers
//! follow one retry policy: factor, and on failure retry once with a
//! diagonal jitter of `1e-10 * trace / n` before giving up.

use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::{Accum, Mat, MatRef, Par, Side};

use crate::error::{OplError, Result};

#[cfg(feature = "parallel")]
#[inline]
fn par() -> Par {
    Par::rayon(0)
}

#[cfg(not(feature = "parallel"))]
#[inline]
fn par() -> Par {
    Par::Seq
}

pub fn col(v: &[f64]) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(v, v.len(), 1)
}

pub fn to_vec(m: MatRef<'_, f64>) -> Vec<f64> {
    debug_assert_eq!(m.ncols(), 1);
    (0..m.nrows()).map(|i| m[(i, 0)]).collect()
}

/// `a * x`
pub fn matvec(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    assert_eq!(a.ncols(), x.len());
    let mut out = Mat::<f64>::zeros(a.nrows(), 1);
    faer::linalg::matmul::matmul(&mut out, Accum::Replace, a, col(x), 1.0, par());
    out.col_as_slice(0).to_vec()
}

/// `a^T * x`
pub fn matvec_t(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    matvec(a.transpose(), x)
}

/// `a * b`
pub fn matmul(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = Mat::<f64>::zeros(a.nrows(), b.ncols());
    faer::linalg::matmul::matmul(&mut out, Accum::Replace, a, b, 1.0, par());
    out
}

/// `a^T * b`
pub fn matmul_tn(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    matmul(a.transpose(), b)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn mean(a: &[f64]) -> f64 {
    a.iter().sum::<f64>() / a.len() as f64
}

/// `a - b`
pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `a + s * b`
pub fn axpy(a: &[f64], s: f64, b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

pub fn mat_all_finite(m: MatRef<'_, f64>) -> bool {
    (0..m.ncols()).all(|j| (0..m.nrows()).all(|i| m[(i, j)].is_finite()))
}

pub fn trace(m: MatRef<'_, f64>) -> f64 {
    (0..m.nrows().min(m.ncols())).map(|i| m[(i, i)]).sum()
}

pub fn add_diag(m: &Mat<f64>, s: f64) -> Mat<f64> {
    let mut out = m.clone();
    for i in 0..out.nrows() {
        out[(i, i)] += s;
    }
    out
}

/// Relative diagonal jitter; zero when the matrix has no diagonal scale.
fn jitter_for(m: MatRef<'_, f64>) -> f64 {
    let n = m.nrows().max(1) as f64;
    1e-10 * trace(m).abs() / n
}

/// General square solver (partial-pivot LU).
pub struct LuSolver {
    lu: PartialPivLu<f64>,
}

impl LuSolver {
    pub fn new(a: &Mat<f64>) -> Result<Self> {
        assert_eq!(a.nrows(), a.ncols());
        if !mat_all_finite(a.as_ref()) {
            return Err(OplError::Numerical("non-finite matrix passed to LU".into()));
        }
        let first = PartialPivLu::new(a.as_ref());
        if lu_is_healthy(&first) {
            return Ok(Self { lu: first });
        }
        let jitter = jitter_for(a.as_ref());
        if jitter == 0.0 {
            return Err(OplError::SingularSystem(format!("LU of {}x{} matrix", a.nrows(), a.nrows())));
        }
        let jittered = add_diag(a, jitter);
        let second = PartialPivLu::new(jittered.as_ref());
        if lu_is_healthy(&second) {
            Ok(Self { lu: second })
        } else {
            Err(OplError::SingularSystem(format!("LU of {}x{} matrix", a.nrows(), a.nrows())))
        }
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut rhs = Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
        self.lu.solve_in_place(&mut rhs);
        rhs.col_as_slice(0).to_vec()
    }

    pub fn solve_mat(&self, b: MatRef<'_, f64>) -> Mat<f64> {
        let mut rhs = b.to_owned();
        self.lu.solve_in_place(&mut rhs);
        rhs
    }
}

fn lu_is_healthy(lu: &PartialPivLu<f64>) -> bool {
    let u = lu.U();
    let n = u.nrows();
    let mut max = 0.0_f64;
    let mut min = f64::INFINITY;
    for i in 0..n {
        let d = u[(i, i)].abs();
        if !d.is_finite() {
            return false;
        }
        max = max.max(d);
        min = min.min(d);
    }
    n == 0 || (max > 0.0 && min > 1e-14 * max)
}

/// Symmetric positive-definite solver (Cholesky).
pub struct SpdSolver {
    llt: faer::linalg::solvers::Llt<f64>,
}

impl SpdSolver {
    pub fn new(a: &Mat<f64>) -> Result<Self> {
        if !mat_all_finite(a.as_ref()) {
            return Err(OplError::Numerical("non-finite matrix passed to Cholesky".into()));
        }
        if let Ok(llt) = a.llt(Side::Lower) {
            return Ok(Self { llt });
        }
        let jittered = add_diag(a, jitter_for(a.as_ref()));
        jittered
            .llt(Side::Lower)
            .map(|llt| Self { llt })
            .map_err(|_| OplError::SingularSystem(format!("Cholesky of {}x{} matrix", a.nrows(), a.nrows())))
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut rhs = Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
        self.llt.solve_in_place(&mut rhs);
        rhs.col_as_slice(0).to_vec()
    }

    pub fn solve_mat(&self, b: MatRef<'_, f64>) -> Mat<f64> {
        let mut rhs = b.to_owned();
        self.llt.solve_in_place(&mut rhs);
        rhs
    }
}

/// Symmetric eigendecomposition, eigenvalues ascending.
pub fn sym_eigen(a: &Mat<f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    let evd = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| OplError::Numerical(format!("eigendecomposition failed: {e:?}")))?;
    let s = evd.S();
    let vals = (0..a.nrows()).map(|i| s[i]).collect();
    Ok((vals, evd.U().to_owned()))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &Mat<f64>) -> Result<f64> {
    let vals = a
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| OplError::Numerical(format!("eigenvalues failed: {e:?}")))?;
    Ok(vals.first().copied().unwrap_or(0.0))
}

/// `v diag(s) v^T`
pub fn scaled_gram(v: &Mat<f64>, s: &[f64]) -> Mat<f64> {
    let scaled = Mat::from_fn(v.nrows(), v.ncols(), |i, j| v[(i, j)] * s[j]);
    matmul(scaled.as_ref(), v.transpose())
}

pub fn max_abs_diff(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
    assert_eq!((a.nrows(), a.ncols()), (b.nrows(), b.ncols()));
    let mut m = 0.0_f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max((a[(i, j)] - b[(i, j)]).abs());
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_solves_small_system() {
        let a = Mat::from_fn(3, 3, |i, j| if i == j { 4.0 } else { 1.0 / (1.0 + i as f64 + j as f64) });
        let x = vec![1.0, -2.0, 0.5];
        let b = matvec(a.as_ref(), &x);
        let got = LuSolver::new(&a).unwrap().solve_vec(&b);
        for (g, e) in got.iter().zip(&x) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_lu_is_reported() {
        let a = Mat::<f64>::zeros(3, 3);
        assert!(matches!(LuSolver::new(&a), Err(OplError::SingularSystem(_))));
    }

    #[test]
    fn spd_rejects_indefinite() {
        let a = Mat::from_fn(2, 2, |i, j| if i == j { -1.0 } else { 0.0 });
        assert!(SpdSolver::new(&a).is_err());
    }
}
