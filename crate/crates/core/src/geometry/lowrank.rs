use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Result, SpatialError};
use crate::gls::PrecisionOperator;

/// The correlation `R(delta) = delta * S S' + (1 - delta) * I` for a rank-k
/// basis matrix `S`, with inverse and determinant evaluated through k x k
/// systems only.
#[derive(Debug, Clone)]
pub struct LowRankCorrelation {
    basis_rows: DMatrix<f64>,
    delta: f64,
    /// Cholesky factor of `((1 - delta) / delta) I_k + S'S`, present when delta > 0.
    factor: Option<Cholesky<f64, Dyn>>,
}

fn check_delta(delta: f64) -> Result<()> {
    if (0.0..1.0).contains(&delta) {
        Ok(())
    } else {
        Err(SpatialError::param(format!("delta must lie in [0, 1), got {delta}")))
    }
}

impl LowRankCorrelation {
    pub fn new(basis_rows: DMatrix<f64>, delta: f64) -> Result<Self> {
        check_delta(delta)?;
        let factor = if delta > 0.0 && basis_rows.ncols() > 0 {
            let k = basis_rows.ncols();
            let mut core = basis_rows.tr_mul(&basis_rows);
            let ridge = (1.0 - delta) / delta;
            for i in 0..k {
                core[(i, i)] += ridge;
            }
            Some(Cholesky::new(core).ok_or(SpatialError::NotPositiveDefinite)?)
        } else {
            None
        };
        Ok(LowRankCorrelation {
            basis_rows,
            delta,
            factor,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn basis_rows(&self) -> &DMatrix<f64> {
        &self.basis_rows
    }

    pub fn n(&self) -> usize {
        self.basis_rows.nrows()
    }

    /// `R(delta)^{-1} M` via the Woodbury identity, O(nkm + k^3).
    pub fn inverse_apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.factor {
            None => m / (1.0 - self.delta),
            Some(chol) => {
                let projected = self.basis_rows.tr_mul(m);
                let solved = chol.solve(&projected);
                let mut out = m - &self.basis_rows * solved;
                out /= 1.0 - self.delta;
                out
            }
        }
    }

    /// `log |R(delta)|` via the matrix determinant lemma.
    pub fn log_det(&self) -> f64 {
        let n = self.n() as f64;
        let k = self.basis_rows.ncols();
        if self.delta == 0.0 {
            return 0.0;
        }
        let one_minus = 1.0 - self.delta;
        if k == 0 {
            return n * one_minus.ln();
        }
        let mut small = self.basis_rows.tr_mul(&self.basis_rows) * self.delta;
        for i in 0..k {
            small[(i, i)] += one_minus;
        }
        let small_log_det = match Cholesky::new(small) {
            Some(chol) => 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
            None => f64::NAN,
        };
        (n - k as f64) * one_minus.ln() + small_log_det
    }

    /// The dense n x n matrix; test and diagnostic use only.
    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut r = &self.basis_rows * self.basis_rows.transpose() * self.delta;
        for i in 0..n {
            r[(i, i)] += 1.0 - self.delta;
        }
        r
    }
}

impl PrecisionOperator for LowRankCorrelation {
    fn dim(&self) -> usize {
        self.n()
    }

    fn apply(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.inverse_apply(m))
    }

    /// `(I - U'U) / (1 - delta)` with `U = L^{-1} S'`.
    fn to_dense(&self) -> Result<DMatrix<f64>> {
        let n = self.n();
        let scale = 1.0 / (1.0 - self.delta);
        let Some(chol) = &self.factor else {
            return Ok(DMatrix::identity(n, n) * scale);
        };
        let u = chol
            .l_dirty()
            .solve_lower_triangular(&self.basis_rows.transpose())
            .ok_or(SpatialError::NotPositiveDefinite)?;
        let mut out = u.transpose() * &u;
        out.neg_mut();
        for i in 0..n {
            out[(i, i)] += 1.0;
        }
        out *= scale;
        Ok(out)
    }
}

/// Free-function form of [`LowRankCorrelation::inverse_apply`].
pub fn low_rank_inverse_apply(lr: &LowRankCorrelation, m: &DMatrix<f64>) -> DMatrix<f64> {
    lr.inverse_apply(m)
}

/// Free-function form of [`LowRankCorrelation::log_det`].
pub fn low_rank_log_det(lr: &LowRankCorrelation) -> f64 {
    lr.log_det()
}
