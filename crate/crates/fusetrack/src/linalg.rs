//! Angle arithmetic and small dense solves.
//!
//! Everything here is sized for the fixed dimensions of the tracker (state
//! 11, observation 9); no attempt is made at general-purpose linear algebra.

use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;

use crate::{Error, Result};

/// Normalize an angle into the half-open interval `(-pi, pi]`.
///
/// The result is congruent to `theta` modulo 2*pi. Non-finite input is an
/// error.
pub fn wrap_angle(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::Numerics(format!(
            "wrap_angle: non-finite input {theta}"
        )));
    }
    Ok(wrap(theta))
}

/// Infallible wrap for values already known to be finite.
#[inline]
pub(crate) fn wrap(theta: f64) -> f64 {
    debug_assert!(theta.is_finite());
    let two_pi = 2.0 * PI;
    let a = theta.rem_euclid(two_pi); // [0, 2*pi)
    if a > PI {
        a - two_pi
    } else {
        a
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct CholFactor {
    lower: DMatrix<f64>,
}

impl CholFactor {
    /// Factor `s = L * L^T`. Fails on a non-SPD input, naming the leading
    /// principal minor whose pivot is not positive (1-based).
    pub fn new(s: &DMatrix<f64>) -> Result<Self> {
        let n = s.nrows();
        if s.ncols() != n {
            return Err(Error::Numerics(format!(
                "cholesky: matrix is {}x{}, not square",
                s.nrows(),
                s.ncols()
            )));
        }
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut d = s[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Numerics(format!(
                    "cholesky: matrix not positive definite at leading minor {}",
                    j + 1
                )));
            }
            let dj = d.sqrt();
            l[(j, j)] = dj;
            for i in (j + 1)..n {
                let mut v = s[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = v / dj;
            }
        }
        Ok(CholFactor { lower: l })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Solve `s * x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(&mut x);
        x
    }

    fn solve_in_place(&self, x: &mut DVector<f64>) {
        let n = self.dim();
        let l = &self.lower;
        // forward: L y = b
        for i in 0..n {
            let mut v = x[i];
            for k in 0..i {
                v -= l[(i, k)] * x[k];
            }
            x[i] = v / l[(i, i)];
        }
        // backward: L^T x = y
        for i in (0..n).rev() {
            let mut v = x[i];
            for k in (i + 1)..n {
                v -= l[(k, i)] * x[k];
            }
            x[i] = v / l[(i, i)];
        }
    }

    /// Solve `s * X = B` column by column.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        for mut col in out.column_iter_mut() {
            let mut x = DVector::from_column_slice(col.as_slice());
            self.solve_in_place(&mut x);
            col.copy_from(&x);
        }
        out
    }

    /// Squared Mahalanobis norm `v^T s^{-1} v`, evaluated as `|L^{-1} v|^2`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        let n = self.dim();
        let l = &self.lower;
        let mut y = v.clone();
        let mut acc = 0.0;
        for i in 0..n {
            let mut t = y[i];
            for k in 0..i {
                t -= l[(i, k)] * y[k];
            }
            let t = t / l[(i, i)];
            y[i] = t;
            acc += t * t;
        }
        acc
    }
}

/// Solve `s * x = b` for a symmetric positive definite `s`.
pub fn chol_solve(s: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(CholFactor::new(s)?.solve(b))
}

/// Symmetrize in place: `m <- (m + m^T) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix (used by invariant checks).
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = nalgebra::SymmetricEigen::new(m.clone());
    sym.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}
