//! Small dense and tridiagonal helpers shared by the modules.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};

use crate::error::{Error, Result};

/// Symmetric matrix similar to a tridiagonal `m`, if one exists.
///
/// Requires `m[i+1,i] * m[i,i+1] >= 0` for every pair; the symmetric
/// off-diagonal is the signed geometric mean of the pair.
pub fn symmetrize_tridiagonal(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..n {
            if i.abs_diff(j) > 1 && m[(i, j)] != 0.0 {
                return None;
            }
        }
    }
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        s[(i, i)] = m[(i, i)];
    }
    for i in 0..n.saturating_sub(1) {
        let (up, lo) = (m[(i, i + 1)], m[(i + 1, i)]);
        let p = up * lo;
        if p < 0.0 {
            return None;
        }
        let off = p.sqrt().copysign(if up != 0.0 { up } else { lo });
        s[(i, i + 1)] = off;
        s[(i + 1, i)] = off;
    }
    Some(s)
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn sym_max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(f64::NEG_INFINITY)
}

/// Real parts of the eigenvalues of a general square matrix, ascending.
pub fn general_real_parts(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("eigenvalue iteration did not converge".into()))?;
    let mut re: Vec<f64> = schur.complex_eigenvalues().iter().map(|z| z.re).collect();
    re.sort_by(f64::total_cmp);
    Ok(re)
}

/// Maximum eigenvalue of `D M D` with `D = diag(|M_ii|^{-1/2})`.
///
/// Congruence preserves inertia, so the sign matches that of `M`, while the
/// unit diagonal makes the value comparable across badly scaled blocks.
/// Zero diagonal entries are left unscaled.
pub fn equilibrated_max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let d: Vec<f64> = (0..m.nrows())
        .map(|i| {
            let a = m[(i, i)].abs();
            if a > 0.0 {
                1.0 / a.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let scaled = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| d[i] * m[(i, j)] * d[j]);
    sym_max_eigenvalue(&scaled)
}

pub fn symmetric_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= rel_tol * scale))
}

/// LU factors of a tridiagonal matrix without pivoting (Thomas algorithm).
///
/// Valid for diagonally dominant systems such as `I - h A` with `A` a
/// diffusion stencil.
#[derive(Debug, Clone)]
pub struct TridiagonalLu {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
}

impl TridiagonalLu {
    /// `sub[i] = M[i+1,i]`, `sup[i] = M[i,i+1]`.
    pub fn new(sub: &[f64], diag: &[f64], sup: &[f64]) -> Result<Self> {
        let n = diag.len();
        let mut d = diag.to_vec();
        let mut l = vec![0.0; n.saturating_sub(1)];
        for i in 1..n {
            if d[i - 1] == 0.0 {
                return Err(Error::Numerical("zero pivot in tridiagonal factorization".into()));
            }
            l[i - 1] = sub[i - 1] / d[i - 1];
            d[i] -= l[i - 1] * sup[i - 1];
        }
        if d.iter().any(|x| *x == 0.0 || !x.is_finite()) {
            return Err(Error::Numerical("singular tridiagonal matrix".into()));
        }
        Ok(TridiagonalLu {
            lower: l,
            diag: d,
            upper: sup.to_vec(),
        })
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.diag.len();
        for i in 1..n {
            x[i] -= self.lower[i - 1] * x[i - 1];
        }
        x[n - 1] /= self.diag[n - 1];
        for i in (0..n - 1).rev() {
            x[i] = (x[i] - self.upper[i] * x[i + 1]) / self.diag[i];
        }
    }
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.amax()
}
