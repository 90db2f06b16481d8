//! Dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, Matrix2};

use crate::error::{Result, WitError};

/// Relative pivot tolerance below which a QR factor is treated as rank deficient.
const RANK_TOL: f64 = 1e-10;

/// Orthonormal basis of the column space of a design matrix.
///
/// Used for the projector `P_X` and the annihilator `M_X = I - P_X`
/// without ever forming an `n x n` matrix.
#[derive(Debug, Clone)]
pub struct Basis {
    q: DMatrix<f64>,
    nrows: usize,
}

impl Basis {
    /// Builds the basis by Householder QR; fails if `x` is not of full column rank.
    pub fn new(x: &DMatrix<f64>) -> Result<Self> {
        let (n, k) = x.shape();
        if k == 0 {
            return Ok(Self::empty(n));
        }
        if k > n {
            return Err(WitError::Rank(format!("{k} columns exceed {n} rows")));
        }
        let qr = x.clone().qr();
        let r = qr.r();
        check_triangular_rank(&r)?;
        Ok(Basis {
            q: qr.q(),
            nrows: n,
        })
    }

    /// Basis of the trivial subspace of `R^n`.
    pub fn empty(n: usize) -> Self {
        Basis {
            q: DMatrix::zeros(n, 0),
            nrows: n,
        }
    }

    pub fn dim(&self) -> usize {
        self.q.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.dim() == 0 {
            return DVector::zeros(v.len());
        }
        &self.q * (self.q.tr_mul(v))
    }

    pub fn annihilate(&self, v: &DVector<f64>) -> DVector<f64> {
        v - self.project(v)
    }

    pub fn project_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        if self.dim() == 0 {
            return DMatrix::zeros(m.nrows(), m.ncols());
        }
        &self.q * (self.q.tr_mul(m))
    }

    pub fn annihilate_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        m - self.project_matrix(m)
    }

    /// `Q^T v`: coordinates of the projection of `v` in the orthonormal basis.
    pub fn coordinates(&self, v: &DVector<f64>) -> DVector<f64> {
        self.q.tr_mul(v)
    }
}

fn check_triangular_rank(r: &DMatrix<f64>) -> Result<()> {
    let diag: Vec<f64> = (0..r.nrows().min(r.ncols()))
        .map(|i| r[(i, i)].abs())
        .collect();
    let scale = diag.iter().cloned().fold(0.0_f64, f64::max);
    if scale == 0.0 || !scale.is_finite() {
        return Err(WitError::Rank("design matrix is zero or non-finite".into()));
    }
    if let Some(j) = diag.iter().position(|&d| d <= RANK_TOL * scale) {
        return Err(WitError::Rank(format!(
            "design matrix is rank deficient at column {j}"
        )));
    }
    Ok(())
}

/// Least-squares coefficients of `y` on `x` via QR.
pub fn least_squares(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    let (n, k) = x.shape();
    if y.len() != n {
        return Err(WitError::Dimension(format!(
            "response has {} rows, design has {n}",
            y.len()
        )));
    }
    if k == 0 {
        return Ok(DVector::zeros(0));
    }
    if k > n {
        return Err(WitError::Rank(format!("{k} columns exceed {n} rows")));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    check_triangular_rank(&r)?;
    let qty = qr.q().tr_mul(y);
    r.solve_upper_triangular(&qty)
        .ok_or_else(|| WitError::Rank("triangular solve failed".into()))
}

/// Solves `a x = b` for a symmetric positive definite `a`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| WitError::Rank("matrix is not positive definite".into()))?;
    Ok(chol.solve(b))
}

/// Eigenvalues `(min, max)` of `a^{-1} b` for symmetric 2x2 `a` (positive definite) and `b`.
///
/// Closed form from `det(b - m a) = 0`; a slightly negative discriminant
/// (down to `-1e-12` relative) is clamped to zero.
pub fn gen_eig_2x2(a: &Matrix2<f64>, b: &Matrix2<f64>) -> Result<(f64, f64)> {
    let det_a = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
    if !(det_a > 0.0) || !(a[(0, 0)] > 0.0) {
        return Err(WitError::Numerical(format!(
            "2x2 generalized eigenproblem: left matrix not positive definite (det {det_a:e})"
        )));
    }
    let det_b = b[(0, 0)] * b[(1, 1)] - b[(0, 1)] * b[(1, 0)];
    let lin = a[(0, 0)] * b[(1, 1)] + a[(1, 1)] * b[(0, 0)]
        - a[(0, 1)] * b[(1, 0)]
        - a[(1, 0)] * b[(0, 1)];
    // det_a m^2 - lin m + det_b = 0
    let half = lin / (2.0 * det_a);
    let mut disc = half * half - det_b / det_a;
    if disc < 0.0 {
        let scale = (half * half)
            .max(det_b.abs() / det_a)
            .max(f64::MIN_POSITIVE);
        if disc < -1e-12 * scale {
            return Err(WitError::Numerical(format!(
                "2x2 generalized eigenproblem has complex roots (discriminant {disc:e})"
            )));
        }
        disc = 0.0;
    }
    let root = disc.sqrt();
    let (lo, hi) = (half - root, half + root);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(WitError::Numerical("non-finite eigenvalue".into()));
    }
    Ok((lo, hi))
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power iteration,
/// inflated by a relative `1e-6` so the result bounds the true value from above.
pub fn largest_eigenvalue(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> f64 {
    let p = m.nrows();
    if p == 0 {
        return 0.0;
    }
    // a deterministic start that is not orthogonal to any coordinate axis
    let mut v = DVector::from_fn(p, |i, _| 1.0 + (i as f64 + 1.0).sqrt().fract());
    v /= v.norm();
    let mut value = 0.0;
    for _ in 0..max_iter {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - value).abs() <= tol * next.abs().max(1.0) {
            return next.max(norm) * (1.0 + 1e-6);
        }
        value = next;
    }
    value * (1.0 + 1e-6)
}

/// Symmetric 2x2 cross product `[u, v]^T [s, t]`.
pub fn cross2(
    u: &DVector<f64>,
    v: &DVector<f64>,
    s: &DVector<f64>,
    t: &DVector<f64>,
) -> Matrix2<f64> {
    Matrix2::new(u.dot(s), u.dot(t), v.dot(s), v.dot(t))
}

/// Copies the listed columns of `m` into a new matrix.
pub fn select_columns(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}
