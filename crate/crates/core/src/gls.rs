//! The characteristic-matrix engine behind spatially adjusted splitting.
//!
//! For a tree design `C` (columns are nested node indicators) and a precision
//! `P = Sigma^{-1}`, the characteristic matrix is
//! `Omega = P - P C (C' P C)^{-1} C' P`. The profiled GLS loss of the tree is
//! `Y' Omega Y`, and appending a column `c` lowers it by
//! `(c' w)^2 / (c' Omega c)` with `w = Omega Y`. Accepting `c` is a symmetric
//! rank-one downdate of `Omega`, so the whole tree is grown without ever
//! refactorising `Sigma`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Result, SpatialError};

/// Relative tolerance on split denominators, scaled by `trace(Omega^0) / n`.
pub const DEFAULT_DTOL: f64 = 1e-10;

/// Something that applies `Sigma^{-1}` to a block of columns.
pub trait PrecisionOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>>;

    /// `Sigma^{-1}` as a dense matrix.
    fn to_dense(&self) -> Result<DMatrix<f64>> {
        let n = self.dim();
        self.apply(&DMatrix::identity(n, n))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IdentityPrecision(pub usize);

impl PrecisionOperator for IdentityPrecision {
    fn dim(&self) -> usize {
        self.0
    }

    fn apply(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(m.clone())
    }
}

/// A precision stored as an explicit dense inverse.
#[derive(Debug, Clone)]
pub struct DensePrecision {
    pub inverse: DMatrix<f64>,
}

impl DensePrecision {
    pub fn from_covariance(cov: &DMatrix<f64>) -> Result<Self> {
        let chol = Cholesky::new(cov.clone()).ok_or(SpatialError::NotPositiveDefinite)?;
        Ok(DensePrecision { inverse: chol.inverse() })
    }
}

impl PrecisionOperator for DensePrecision {
    fn dim(&self) -> usize {
        self.inverse.nrows()
    }

    fn apply(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(&self.inverse * m)
    }
}

/// Solves against a dense covariance by factorising it on every call. This is
/// the cost model of scoring each candidate from scratch.
#[derive(Debug, Clone)]
pub struct CovarianceSolve {
    pub covariance: DMatrix<f64>,
}

impl PrecisionOperator for CovarianceSolve {
    fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    fn apply(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let chol = Cholesky::new(self.covariance.clone()).ok_or(SpatialError::NotPositiveDefinite)?;
        Ok(chol.solve(m))
    }
}

/// Observations entering a proposed new terminal node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndicator {
    pub member_indices: Vec<usize>,
    pub parent_node: usize,
}

impl SplitIndicator {
    pub fn new(mut member_indices: Vec<usize>, parent_node: usize) -> Self {
        member_indices.sort_unstable();
        SplitIndicator {
            member_indices,
            parent_node,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CharacteristicMatrix {
    omega: DMatrix<f64>,
    w: DVector<f64>,
    n_splits: usize,
    dtol: f64,
}

/// Builds `Omega^0` for the root design `C = [1]`.
pub fn init_characteristic(precision: &dyn PrecisionOperator, y: &DVector<f64>) -> Result<CharacteristicMatrix> {
    CharacteristicMatrix::new(precision, y, DEFAULT_DTOL)
}

impl CharacteristicMatrix {
    pub fn new(precision: &dyn PrecisionOperator, y: &DVector<f64>, relative_dtol: f64) -> Result<Self> {
        let n = y.len();
        if precision.dim() != n {
            return Err(SpatialError::Dimension(format!(
                "precision operator is {}x{}, response has length {}",
                precision.dim(),
                precision.dim(),
                n
            )));
        }
        let p = precision.to_dense()?;
        Self::from_precision_matrix(p, y, relative_dtol)
    }

    /// Same as [`CharacteristicMatrix::new`] with `Sigma^{-1}` already dense.
    pub fn from_precision_matrix(mut p: DMatrix<f64>, y: &DVector<f64>, relative_dtol: f64) -> Result<Self> {
        let n = y.len();
        let row_sums: DVector<f64> = DVector::from_fn(n, |i, _| p.row(i).sum());
        let total = row_sums.sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(SpatialError::InvalidPrecision(total));
        }
        {
            let s = p.as_mut_slice();
            for j in 0..n {
                for i in 0..j {
                    let avg = 0.5 * (s[j * n + i] + s[i * n + j]);
                    s[j * n + i] = avg;
                    s[i * n + j] = avg;
                }
            }
            for j in 0..n {
                let uj = row_sums[j];
                let col = &mut s[j * n..(j + 1) * n];
                for (i, v) in col.iter_mut().enumerate() {
                    *v -= (row_sums[i] * uj) / total;
                }
            }
        }
        let w = &p * y;
        let trace = p.trace();
        let dtol = relative_dtol * (trace / n as f64).abs();
        Ok(CharacteristicMatrix {
            omega: p,
            w,
            n_splits: 0,
            dtol,
        })
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn w(&self) -> &DVector<f64> {
        &self.w
    }

    pub fn n(&self) -> usize {
        self.w.len()
    }

    pub fn n_splits(&self) -> usize {
        self.n_splits
    }

    /// Absolute denominator tolerance.
    pub fn dtol(&self) -> f64 {
        self.dtol
    }

    #[inline]
    pub(crate) fn column(&self, j: usize) -> &[f64] {
        let n = self.n();
        &self.omega.as_slice()[j * n..(j + 1) * n]
    }

    /// Gain of a single candidate evaluated directly, O(|c|^2).
    pub fn gain(&self, members: &[usize]) -> f64 {
        let mut acc = GainAccumulator::default();
        for &m in members {
            acc.push(self, m);
        }
        acc.gain(self.dtol)
    }

    /// Appends the indicator of `members` to the design.
    pub fn update(&mut self, members: &[usize]) -> Result<()> {
        let n = self.n();
        let mut v = vec![0.0; n];
        for &m in members {
            for (vi, oi) in v.iter_mut().zip(self.column(m)) {
                *vi += oi;
            }
        }
        let d: f64 = members.iter().map(|&m| v[m]).sum();
        if !(d > self.dtol) {
            return Err(SpatialError::DegenerateSplit(d));
        }
        let cw: f64 = members.iter().map(|&m| self.w[m]).sum();
        let inv_d = 1.0 / d;
        let s = self.omega.as_mut_slice();
        for j in 0..n {
            let vj = v[j];
            if vj == 0.0 {
                continue;
            }
            let f = vj * inv_d;
            let col = &mut s[j * n..(j + 1) * n];
            for (o, &vi) in col.iter_mut().zip(&v) {
                *o -= vi * f;
            }
        }
        let scale = cw * inv_d;
        for (wi, vi) in self.w.iter_mut().zip(&v) {
            *wi -= scale * vi;
        }
        self.n_splits += 1;
        Ok(())
    }
}

/// Running numerator and denominator for a candidate that grows one index at
/// a time along a sorted sweep.
#[derive(Debug, Clone, Default)]
pub struct GainAccumulator {
    sum_w: f64,
    denominator: f64,
    members: Vec<usize>,
}

impl GainAccumulator {
    pub fn clear(&mut self) {
        self.sum_w = 0.0;
        self.denominator = 0.0;
        self.members.clear();
    }

    /// Adds index `l`: `D += Omega_ll + 2 sum_{m in c} Omega_{m l}`.
    #[inline]
    pub fn push(&mut self, cm: &CharacteristicMatrix, l: usize) {
        let col = cm.column(l);
        let cross: f64 = self.members.iter().map(|&m| col[m]).sum();
        self.denominator += col[l] + 2.0 * cross;
        self.sum_w += cm.w[l];
        self.members.push(l);
    }

    pub fn numerator(&self) -> f64 {
        self.sum_w * self.sum_w
    }

    pub fn denominator(&self) -> f64 {
        self.denominator
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// `N / D`, or `-inf` when the denominator is at or below `dtol`.
    #[inline]
    pub fn gain(&self, dtol: f64) -> f64 {
        if self.denominator > dtol {
            self.numerator() / self.denominator
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Gains of every prefix of `order`: candidate `i` is `{order[0], ..., order[i]}`.
pub fn incremental_gain_scan(cm: &CharacteristicMatrix, order: &[usize]) -> Vec<f64> {
    let mut acc = GainAccumulator::default();
    order
        .iter()
        .map(|&l| {
            acc.push(cm, l);
            acc.gain(cm.dtol)
        })
        .collect()
}

/// Consuming form of [`CharacteristicMatrix::update`].
pub fn update_characteristic(mut cm: CharacteristicMatrix, chosen: &SplitIndicator) -> Result<CharacteristicMatrix> {
    cm.update(&chosen.member_indices)?;
    Ok(cm)
}

fn solve_normal_equations(gram: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let chol: Cholesky<f64, Dyn> = Cholesky::new(gram).ok_or(SpatialError::RankDeficient)?;
    let diag = chol.l_dirty().diagonal();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 1e-7 * max) {
        return Err(SpatialError::RankDeficient);
    }
    Ok(chol.solve(rhs))
}

/// GLS fit of `Y` on the design `C` from scratch: returns the loss
/// `(Y - C pi)' Sigma^{-1} (Y - C pi)` and the weights `pi`.
pub fn brute_force_gls_loss(
    y: &DVector<f64>,
    c: &DMatrix<f64>,
    precision: &dyn PrecisionOperator,
) -> Result<(f64, DVector<f64>)> {
    if c.nrows() != y.len() || precision.dim() != y.len() {
        return Err(SpatialError::Dimension("design, response and precision sizes differ".into()));
    }
    let pc = precision.apply(c)?;
    let gram = c.tr_mul(&pc);
    let rhs = pc.tr_mul(y);
    let pi = solve_normal_equations(gram, &rhs)?;
    let resid = y - c * &pi;
    let presid = precision.apply(&DMatrix::from_column_slice(resid.len(), 1, resid.as_slice()))?;
    let loss = resid.dot(&presid.column(0));
    Ok((loss, pi))
}

/// `Omega` recomputed from its definition for a full design `C`.
pub fn characteristic_from_design(precision: &dyn PrecisionOperator, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = c.nrows();
    let p = precision.apply(&DMatrix::identity(n, n))?;
    let pc = &p * c;
    let gram = c.tr_mul(&pc);
    let chol = Cholesky::new(gram).ok_or(SpatialError::RankDeficient)?;
    let inner = chol.solve(&pc.transpose());
    Ok(p - pc * inner)
}
