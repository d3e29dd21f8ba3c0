//! Comparison methods: plain random forest, a ridge smoother on a radial
//! basis, the two orders of two-step fitting, and a forest with the basis
//! appended to the covariates.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LocatedDataset;
use crate::error::{Result, SpatialError};
use crate::forest::{fit_fixed_delta, oob_predict, ForestParams, SpatialForest};
use crate::geometry::{BasisConfig, SpatialBasis};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tree::ridge_solve;

/// Anything that predicts at new covariate rows and locations.
pub trait SpatialModel: Send + Sync {
    fn predict(&self, x: &DMatrix<f64>, coords: &DMatrix<f64>) -> Result<Vec<f64>>;
}

impl SpatialModel for SpatialForest {
    fn predict(&self, x: &DMatrix<f64>, coords: &DMatrix<f64>) -> Result<Vec<f64>> {
        SpatialForest::predict(self, x, coords)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmootherParams {
    pub basis: BasisConfig,
    /// `None` uses [`default_lambda_grid`].
    pub lambda_grid: Option<Vec<f64>>,
    pub n_folds: usize,
    pub seed: u64,
}

impl Default for SmootherParams {
    fn default() -> Self {
        SmootherParams {
            basis: BasisConfig::default(),
            lambda_grid: None,
            n_folds: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmootherModel {
    pub basis: SpatialBasis,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub lambda_selected: f64,
    pub cv_mse: Vec<f64>,
    pub lambda_grid: Vec<f64>,
}

/// Twelve log-spaced penalties over `[1e-4, 1e4] * trace(S'S) / k`.
pub fn default_lambda_grid(s: &DMatrix<f64>) -> Vec<f64> {
    let k = s.ncols().max(1) as f64;
    let scale = s.norm_squared() / k;
    let scale = if scale > 0.0 { scale } else { 1.0 };
    (0..12)
        .map(|i| scale * 10f64.powf(-4.0 + 8.0 * i as f64 / 11.0))
        .collect()
}

/// Ridge fit with an unpenalised intercept.
fn ridge_with_intercept(s: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> (f64, DVector<f64>) {
    let n = y.len() as f64;
    let y_mean = y.mean();
    if s.ncols() == 0 {
        return (y_mean, DVector::zeros(0));
    }
    let col_means = DVector::from_fn(s.ncols(), |j, _| s.column(j).sum() / n);
    let mut centred = s.clone();
    for (j, mut col) in centred.column_iter_mut().enumerate() {
        col.add_scalar_mut(-col_means[j]);
    }
    let yc = y.add_scalar(-y_mean);
    let coef = ridge_solve(&centred, &yc, lambda);
    (y_mean - col_means.dot(&coef), coef)
}

/// Seeded assignment of `n` indices to `k` folds of near-equal size.
pub fn assign_folds(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from_seed(seed));
    let mut folds = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        folds[i] = pos % k;
    }
    folds
}

fn effective_folds(n: usize, requested: usize) -> usize {
    if n < 10 {
        let k = n.min(5);
        log::warn!("only {n} observations; using {k} cross-validation folds");
        k
    } else {
        requested.min(n)
    }
}

/// Held-out ridge predictions for every row, fold by fold.
fn cv_predictions(s: &DMatrix<f64>, y: &DVector<f64>, folds: &[usize], k: usize, lambda: f64) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for f in 0..k {
        let train: Vec<usize> = (0..y.len()).filter(|&i| folds[i] != f).collect();
        let test: Vec<usize> = (0..y.len()).filter(|&i| folds[i] == f).collect();
        if test.is_empty() {
            continue;
        }
        let (b0, b) = if train.is_empty() {
            (0.0, DVector::zeros(s.ncols()))
        } else {
            ridge_with_intercept(&s.select_rows(&train), &y.select_rows(&train), lambda)
        };
        let preds = s.select_rows(&test) * &b;
        for (t, &i) in test.iter().enumerate() {
            out[i] = b0 + preds[t];
        }
    }
    out
}

/// Ridge-on-basis smoother with the penalty chosen by k-fold CV
/// (ties to the larger penalty) and a final refit on all rows.
pub fn fit_smoother(data: &LocatedDataset, params: &SmootherParams) -> Result<SmootherModel> {
    let (model, _) = fit_smoother_with_cv(data, params)?;
    Ok(model)
}

/// As [`fit_smoother`], also returning held-out predictions at the selected penalty.
pub fn fit_smoother_with_cv(data: &LocatedDataset, params: &SmootherParams) -> Result<(SmootherModel, Vec<f64>)> {
    let y = data.response()?;
    let n = data.n();
    let (basis, s) = SpatialBasis::fit(&data.coords, &params.basis, derive_seed(params.seed, &[0]))?;
    let grid = match &params.lambda_grid {
        Some(g) => g.clone(),
        None => default_lambda_grid(&s),
    };
    if grid.is_empty() || grid.iter().any(|l| !(*l > 0.0)) {
        return Err(SpatialError::param("lambda grid must be nonempty and positive"));
    }
    if params.n_folds < 2 {
        return Err(SpatialError::param("smoother needs at least two folds"));
    }
    let k = effective_folds(n, params.n_folds);
    let folds = assign_folds(n, k.max(1), derive_seed(params.seed, &[1]));
    let cv_mse: Vec<f64> = grid
        .iter()
        .map(|&lambda| {
            let preds = cv_predictions(&s, y, &folds, k, lambda);
            preds.iter().zip(y.iter()).map(|(p, v)| (p - v).powi(2)).sum::<f64>() / n as f64
        })
        .collect();
    let mut best = 0;
    for i in 1..grid.len() {
        let (v, b) = (cv_mse[i], cv_mse[best]);
        if v < b || (v == b && grid[i] > grid[best]) {
            best = i;
        }
    }
    let lambda = grid[best];
    let (intercept, coef) = ridge_with_intercept(&s, y, lambda);
    let held_out = cv_predictions(&s, y, &folds, k, lambda);
    Ok((
        SmootherModel {
            basis,
            coefficients: coef.as_slice().to_vec(),
            intercept,
            lambda_selected: lambda,
            cv_mse,
            lambda_grid: grid,
        },
        held_out,
    ))
}

impl SmootherModel {
    pub fn predict_at(&self, coords: &DMatrix<f64>) -> Result<Vec<f64>> {
        let rows = self.basis.evaluate(coords)?;
        let fit = rows * DVector::from_column_slice(&self.coefficients);
        Ok(fit.iter().map(|v| v + self.intercept).collect())
    }
}

impl SpatialModel for SmootherModel {
    fn predict(&self, _x: &DMatrix<f64>, coords: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.predict_at(coords)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoStepOrder {
    RfFirst,
    SmootherFirst,
}

/// A forest and a smoother, the second fitted to the first's held-out residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStepModel {
    pub order: TwoStepOrder,
    pub forest: SpatialForest,
    pub smoother: SmootherModel,
}

/// Plain random forest: a `delta = 0` forest.
pub fn fit_random_forest(data: &LocatedDataset, params: &ForestParams) -> Result<SpatialForest> {
    fit_fixed_delta(data, 0.0, params)
}

/// Out-of-bag forest predictions, with the all-tree average where a point
/// has no out-of-bag trees.
fn held_out_forest_fit(forest: &SpatialForest, data: &LocatedDataset) -> Result<Vec<f64>> {
    let oob = oob_predict(forest, data, false)?;
    if oob.covered() == data.n() {
        return Ok(oob.predictions.into_iter().map(|p| p.unwrap_or(0.0)).collect());
    }
    let all = forest.predict_trees(&data.x, &data.coords, false)?;
    Ok(oob
        .predictions
        .iter()
        .zip(all)
        .map(|(p, a)| p.unwrap_or(a))
        .collect())
}

pub fn fit_two_step(
    data: &LocatedDataset,
    order: TwoStepOrder,
    rf_params: &ForestParams,
    smoother_params: &SmootherParams,
) -> Result<TwoStepModel> {
    let z = data.response()?;
    match order {
        TwoStepOrder::RfFirst => {
            let forest = fit_random_forest(data, rf_params)?;
            let fit = held_out_forest_fit(&forest, data)?;
            let resid = DVector::from_fn(data.n(), |i, _| z[i] - fit[i]);
            let smoother = fit_smoother(&data.with_response(resid)?, smoother_params)?;
            Ok(TwoStepModel { order, forest, smoother })
        }
        TwoStepOrder::SmootherFirst => {
            let (smoother, held_out) = fit_smoother_with_cv(data, smoother_params)?;
            let resid = DVector::from_fn(data.n(), |i, _| z[i] - held_out[i]);
            let forest = fit_random_forest(&data.with_response(resid)?, rf_params)?;
            Ok(TwoStepModel { order, forest, smoother })
        }
    }
}

impl TwoStepModel {
    /// Forest and smoother contributions separately.
    pub fn predict_parts(&self, x: &DMatrix<f64>, coords: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.forest.predict(x, coords)?, self.smoother.predict_at(coords)?))
    }
}

impl SpatialModel for TwoStepModel {
    fn predict(&self, x: &DMatrix<f64>, coords: &DMatrix<f64>) -> Result<Vec<f64>> {
        let (a, b) = self.predict_parts(x, coords)?;
        Ok(a.iter().zip(b).map(|(u, v)| u + v).collect())
    }
}

/// A plain forest on `[X | S(s)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisForest {
    pub basis: SpatialBasis,
    pub forest: SpatialForest,
    pub n_covariates: usize,
}

fn augment(x: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let p = x.ncols();
    DMatrix::from_fn(x.nrows(), p + s.ncols(), |i, j| if j < p { x[(i, j)] } else { s[(i, j - p)] })
}

pub fn fit_rf_with_basis_covariates(
    data: &LocatedDataset,
    rf_params: &ForestParams,
    basis_config: &BasisConfig,
) -> Result<BasisForest> {
    let p = data.p();
    let (basis, s) = SpatialBasis::fit(&data.coords, basis_config, derive_seed(rf_params.seed, &[u64::MAX - 1]))?;
    let mut augmented = data.clone();
    augmented.x = augment(&data.x, &s);
    augmented.covariate_names.extend((0..s.ncols()).map(|j| format!("basis{j}")));
    let total = augmented.p();
    let mut params = rf_params.clone();
    // keep the sampled fraction of covariates
    params.tree.mtry = ((rf_params.tree.mtry * total) / p.max(1)).clamp(1, total);
    let forest = fit_random_forest(&augmented, &params)?;
    Ok(BasisForest {
        basis,
        forest,
        n_covariates: p,
    })
}

impl SpatialModel for BasisForest {
    fn predict(&self, x: &DMatrix<f64>, coords: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_covariates {
            return Err(SpatialError::Dimension(format!(
                "expected {} covariate columns, got {}",
                self.n_covariates,
                x.ncols()
            )));
        }
        let s = self.basis.evaluate(coords)?;
        self.forest.predict(&augment(x, &s), coords)
    }
}
