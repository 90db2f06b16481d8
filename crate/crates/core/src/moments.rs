//! Cross-product cache for one dataset.
//!
//! Every quantity the tuning and estimation stages need for a candidate valid
//! set is a function of `Z'Z`, `Z'[Y, D]` and `[Y, D]'[Y, D]`, so candidates
//! cost `O(p_c^3)` instead of touching the `n x p` data again.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix2};

use crate::data::IVDataset;
use crate::error::{Result, WitError};

#[derive(Debug, Clone)]
pub struct Moments {
    n: usize,
    ztz: DMatrix<f64>,
    ztz_chol: Cholesky<f64, Dyn>,
    /// columns `Z'Y`, `Z'D`
    zt_yd: DMatrix<f64>,
    /// `[Y, D]'[Y, D]`
    yd: Matrix2<f64>,
    /// `[Y, D]' M_Z [Y, D]`
    resid_full: Matrix2<f64>,
}

impl Moments {
    pub fn new(ds: &IVDataset) -> Result<Self> {
        let z = ds.z();
        let ztz = z.tr_mul(z);
        let ztz_chol = ztz
            .clone()
            .cholesky()
            .ok_or_else(|| WitError::Rank("instrument gram matrix is singular".into()))?;
        let mut zt_yd = DMatrix::zeros(ds.p(), 2);
        zt_yd.set_column(0, &z.tr_mul(ds.y()));
        zt_yd.set_column(1, &z.tr_mul(ds.d()));
        let (y, d) = (ds.y(), ds.d());
        let yd = Matrix2::new(y.dot(y), y.dot(d), d.dot(y), d.dot(d));
        let fitted = zt_yd.tr_mul(&ztz_chol.solve(&zt_yd));
        let resid_full = symmetrize(yd - to_matrix2(&fitted));
        Ok(Moments {
            n: ds.n(),
            ztz,
            ztz_chol,
            zt_yd,
            yd,
            resid_full,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.ztz.nrows()
    }

    /// `[Y, D]' M_Z [Y, D]`
    pub fn resid_full(&self) -> Matrix2<f64> {
        self.resid_full
    }

    /// `[Y, D]'[Y, D]`
    pub fn yd(&self) -> Matrix2<f64> {
        self.yd
    }

    /// `Z_C' Z_C`
    pub fn sub_gram(&self, cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(cols.len(), cols.len(), |i, j| self.ztz[(cols[i], cols[j])])
    }

    /// `Z_C'[Y, D]`
    pub fn sub_cross(&self, cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(cols.len(), 2, |i, k| self.zt_yd[(cols[i], k)])
    }

    /// `[Y, D]' M_{Z_C} [Y, D]`; with `cols` empty this is `[Y, D]'[Y, D]`.
    pub fn residual_cross(&self, cols: &[usize]) -> Result<Matrix2<f64>> {
        if cols.is_empty() {
            return Ok(self.yd);
        }
        let g = self.sub_gram(cols);
        let c = self.sub_cross(cols);
        let chol = g
            .cholesky()
            .ok_or_else(|| WitError::Rank("gram matrix of the invalid block is singular".into()))?;
        let fitted = c.tr_mul(&chol.solve(&c));
        Ok(symmetrize(self.yd - to_matrix2(&fitted)))
    }

    /// `e'e` and `e'P_Z e` for `e = Y - D beta - Z alpha`.
    pub fn residual_norms(&self, beta: f64, alpha: &DVector<f64>) -> (f64, f64) {
        let za = &self.ztz * alpha;
        let zty = self.zt_yd.column(0);
        let ztd = self.zt_yd.column(1);
        let zte = zty - ztd * beta - &za;
        let ee = self.yd[(0, 0)] - 2.0 * beta * self.yd[(0, 1)] + beta * beta * self.yd[(1, 1)]
            - 2.0 * alpha.dot(&zty)
            + 2.0 * beta * alpha.dot(&ztd)
            + alpha.dot(&za);
        let projected = zte.dot(&self.ztz_chol.solve(&zte));
        (ee, projected)
    }
}

fn to_matrix2(m: &DMatrix<f64>) -> Matrix2<f64> {
    Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)])
}

fn symmetrize(m: Matrix2<f64>) -> Matrix2<f64> {
    let off = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    Matrix2::new(m[(0, 0)], off, off, m[(1, 1)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{self, Basis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn residual_cross_matches_projector() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, p) = (30, 5);
        let z = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let d = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let ds = IVDataset::new(y.clone(), d.clone(), z.clone(), None).unwrap();
        let m = Moments::new(&ds).unwrap();
        for cols in [vec![], vec![1], vec![0, 3, 4], (0..p).collect()] {
            let basis = Basis::new(&linalg::select_columns(&z, &cols)).unwrap();
            let (ry, rd) = (basis.annihilate(&y), basis.annihilate(&d));
            let want = linalg::cross2(&ry, &rd, &ry, &rd);
            assert!((m.residual_cross(&cols).unwrap() - want).amax() < 1e-12);
        }
        assert!(
            (m.resid_full() - m.residual_cross(&(0..p).collect::<Vec<_>>()).unwrap()).amax()
                < 1e-12
        );

        let alpha = DVector::from_fn(p, |j, _| 0.1 * j as f64);
        let e = &y - &d * 0.7 - &z * &alpha;
        let (ee, pe) = m.residual_norms(0.7, &alpha);
        assert!((ee - e.norm_squared()).abs() < 1e-10);
        assert!((pe - Basis::new(&z).unwrap().project(&e).norm_squared()).abs() < 1e-10);
    }
}
