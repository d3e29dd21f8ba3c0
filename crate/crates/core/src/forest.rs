//! Bagged ensembles of spatially adjusted trees and the two ways of choosing
//! the spatial mixing weight `delta`: a profiled pseudo-likelihood (PL) and the
//! out-of-bag error of tree-plus-spatial-effect predictions (NP).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LocatedDataset;
use crate::error::{Result, SpatialError};
use crate::geometry::{LowRankCorrelation, SpatialBasis};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tree::{fit_tree_with_basis, ridge_solve, SpatialTree, TreeBasis, TreeParams};

/// Floor on the profiled scale so a constant response stays finite.
pub const KAPPA_FLOOR: f64 = 1e-12;

const GLOBAL_BASIS_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KnotStrategy {
    /// Every tree selects knots among its own in-bag locations.
    #[default]
    PerBag,
    /// One basis on the full training locations, shared by all trees.
    Shared,
}

/// `{0, 0.05, ..., 0.95}`.
pub fn default_delta_grid() -> Vec<f64> {
    (0..20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub tree: TreeParams,
    pub delta_grid: Vec<f64>,
    pub seed: u64,
    pub knots: KnotStrategy,
}

impl ForestParams {
    pub fn for_covariates(p: usize) -> Self {
        ForestParams {
            n_trees: 200,
            tree: TreeParams::for_covariates(p),
            delta_grid: default_delta_grid(),
            seed: 0,
            knots: KnotStrategy::PerBag,
        }
    }

    pub fn validate_grid(&self) -> Result<()> {
        if self.delta_grid.is_empty() {
            return Err(SpatialError::param("delta grid is empty"));
        }
        if self.delta_grid.iter().any(|d| !(0.0..1.0).contains(d)) {
            return Err(SpatialError::param("delta grid values must lie in [0, 1)"));
        }
        if self.delta_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SpatialError::param("delta grid must be strictly increasing"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForestVariant {
    Fixed,
    PseudoLikelihood,
    NonParametric,
}

/// Spatial effect added to PL predictions: one basis on the training
/// locations and its ridge coefficients at the selected `delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalEffect {
    pub basis: SpatialBasis,
    pub eta: Vec<f64>,
    pub kappa_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialForest {
    pub trees: Vec<SpatialTree>,
    pub delta_selected: f64,
    pub variant: ForestVariant,
    pub global: Option<GlobalEffect>,
    pub n_train: usize,
}

/// Criterion values over the `delta` grid and the position of the winner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaProfile {
    pub grid: Vec<f64>,
    pub criterion_values: Vec<f64>,
    pub argbest: usize,
}

impl DeltaProfile {
    pub fn selected(&self) -> f64 {
        self.grid[self.argbest]
    }
}

/// Out-of-bag predictions; `None` where no tree left the point out.
#[derive(Debug, Clone, PartialEq)]
pub struct OobPredictions {
    pub predictions: Vec<Option<f64>>,
    pub n_oob_trees: Vec<usize>,
}

impl OobPredictions {
    pub fn covered(&self) -> usize {
        self.predictions.iter().filter(|p| p.is_some()).count()
    }

    /// Mean squared error over covered points.
    pub fn mse(&self, z: &DVector<f64>) -> f64 {
        let (sum, count) = self
            .predictions
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.map(|v| (v - z[i]).powi(2)))
            .fold((0.0, 0usize), |(s, c), e| (s + e, c + 1));
        if count == 0 {
            f64::INFINITY
        } else {
            sum / count as f64
        }
    }
}

fn draw_bag(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut bag: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    bag.sort_unstable();
    bag
}

pub(crate) fn shared_basis(data: &LocatedDataset, params: &ForestParams) -> Result<(SpatialBasis, DMatrix<f64>)> {
    SpatialBasis::fit(
        &data.coords,
        &params.tree.basis,
        derive_seed(params.seed, &[GLOBAL_BASIS_STREAM]),
    )
}

/// Bootstrap forest at a fixed `delta`. Tree `b` draws its bag and covariate
/// samples from a stream derived from `(seed, b)` alone, so forests at
/// different `delta` share bags.
pub fn fit_fixed_delta(data: &LocatedDataset, delta: f64, params: &ForestParams) -> Result<SpatialForest> {
    let n = data.n();
    if n < 2 {
        return Err(SpatialError::param("a forest needs at least two observations"));
    }
    if !(0.0..1.0).contains(&delta) {
        return Err(SpatialError::param(format!("delta must lie in [0, 1), got {delta}")));
    }
    if params.n_trees < 1 {
        return Err(SpatialError::param("n_trees must be at least 1"));
    }
    params.tree.validate(data.p())?;
    data.response()?;

    let shared = match params.knots {
        KnotStrategy::Shared if delta > 0.0 => Some(shared_basis(data, params)?),
        _ => None,
    };
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_from_seed(derive_seed(params.seed, &[b as u64]));
            let bag = draw_bag(&mut rng, n);
            let source = match &shared {
                Some((basis, rows)) => TreeBasis::Shared { basis, rows },
                None => TreeBasis::PerBag,
            };
            fit_tree_with_basis(data, &bag, delta, &params.tree, source, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let forest = SpatialForest {
        trees,
        delta_selected: delta,
        variant: ForestVariant::Fixed,
        global: None,
        n_train: n,
    };
    if params.n_trees >= 30 {
        let uncovered = forest.oob_counts().iter().filter(|&&c| c == 0).count();
        if uncovered > 0 {
            log::warn!("{uncovered} training point(s) are in every bag and have no out-of-bag trees");
        }
    }
    Ok(forest)
}

/// Averages member predictions over the members whose bag excludes each
/// point. `predict_member(b, rows)` must return predictions for `rows`.
pub fn oob_aggregate<F>(n: usize, bags: &[&[usize]], predict_member: F) -> Result<OobPredictions>
where
    F: Fn(usize, &[usize]) -> Result<Vec<f64>> + Sync,
{
    let per_member = bags
        .par_iter()
        .enumerate()
        .map(|(b, bag)| {
            let mut in_bag = vec![false; n];
            for &i in *bag {
                in_bag[i] = true;
            }
            let rows: Vec<usize> = (0..n).filter(|&i| !in_bag[i]).collect();
            let preds = if rows.is_empty() { Vec::new() } else { predict_member(b, &rows)? };
            Ok((rows, preds))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for (rows, preds) in per_member {
        for (&i, v) in rows.iter().zip(preds) {
            sums[i] += v;
            counts[i] += 1;
        }
    }
    let predictions = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { Some(s / c as f64) } else { None })
        .collect();
    Ok(OobPredictions {
        predictions,
        n_oob_trees: counts,
    })
}

impl SpatialForest {
    pub fn bags(&self) -> Vec<&[usize]> {
        self.trees.iter().map(|t| t.in_bag_indices.as_slice()).collect()
    }

    pub fn oob_counts(&self) -> Vec<usize> {
        let mut counts = vec![self.trees.len(); self.n_train];
        for tree in &self.trees {
            let mut seen = vec![false; self.n_train];
            for &i in &tree.in_bag_indices {
                if !seen[i] {
                    seen[i] = true;
                    counts[i] -= 1;
                }
            }
        }
        counts
    }

    /// Average of the trees' predictions.
    pub fn predict_trees(&self, x: &DMatrix<f64>, coords: &DMatrix<f64>, include_spatial: bool) -> Result<Vec<f64>> {
        let per_tree = self
            .trees
            .par_iter()
            .map(|t| t.predict(x, coords, include_spatial))
            .collect::<Result<Vec<_>>>()?;
        let mut out = vec![0.0; x.nrows()];
        for preds in per_tree {
            for (o, v) in out.iter_mut().zip(preds) {
                *o += v;
            }
        }
        let b = self.trees.len() as f64;
        out.iter_mut().for_each(|o| *o /= b);
        Ok(out)
    }

    pub fn predict(&self, x: &DMatrix<f64>, coords: &DMatrix<f64>) -> Result<Vec<f64>> {
        match (&self.variant, &self.global) {
            (ForestVariant::PseudoLikelihood, Some(global)) => {
                let mut out = self.predict_trees(x, coords, false)?;
                if !global.eta.is_empty() {
                    let rows = global.basis.evaluate(coords)?;
                    let effect = rows * DVector::from_column_slice(&global.eta);
                    for (o, e) in out.iter_mut().zip(effect.iter()) {
                        *o += e;
                    }
                }
                Ok(out)
            }
            _ => self.predict_trees(x, coords, true),
        }
    }
}

pub fn oob_predict(forest: &SpatialForest, data: &LocatedDataset, include_spatial: bool) -> Result<OobPredictions> {
    if data.n() != forest.n_train {
        return Err(SpatialError::Dimension(format!(
            "forest was trained on {} rows, data has {}",
            forest.n_train,
            data.n()
        )));
    }
    let bags = forest.bags();
    oob_aggregate(data.n(), &bags, |b, rows| {
        let x = data.x.select_rows(rows);
        let coords = data.coords.select_rows(rows);
        forest.trees[b].predict(&x, &coords, include_spatial)
    })
}

pub fn predict_forest(forest: &SpatialForest, x_new: &DMatrix<f64>, locations_new: &DMatrix<f64>) -> Result<Vec<f64>> {
    forest.predict(x_new, locations_new)
}

/// Internals of one pseudo-likelihood evaluation.
#[derive(Debug, Clone)]
pub struct PseudoLikelihood {
    pub value: f64,
    pub kappa_hat: f64,
    pub log_det: f64,
    /// Bagged tree estimate used for the residuals.
    pub fitted: DVector<f64>,
    /// Points without OOB trees, filled with the all-tree average.
    pub n_uncovered: usize,
}

/// `-(n/2) log kappa - (1/2) log|R(delta)| - n/2` with
/// `kappa = (Y - f)' R(delta)^{-1} (Y - f) / n`, `f` the OOB bagged trees.
pub fn evaluate_pseudo_likelihood(
    forest: &SpatialForest,
    data: &LocatedDataset,
    global_rows: &DMatrix<f64>,
    delta: f64,
) -> Result<PseudoLikelihood> {
    let z = data.response()?;
    let n = data.n();
    let oob = oob_predict(forest, data, false)?;
    let n_uncovered = n - oob.covered();
    let fallback = if n_uncovered > 0 {
        log::warn!("{n_uncovered} point(s) lack OOB trees; using the all-tree average for them");
        Some(forest.predict_trees(&data.x, &data.coords, false)?)
    } else {
        None
    };
    let fitted = DVector::from_fn(n, |i, _| {
        oob.predictions[i].unwrap_or_else(|| fallback.as_ref().map(|f| f[i]).unwrap_or(0.0))
    });
    let resid = z - &fitted;
    let lr = LowRankCorrelation::new(global_rows.clone(), delta)?;
    let solved = lr.inverse_apply(&DMatrix::from_column_slice(n, 1, resid.as_slice()));
    let quad = resid.dot(&solved.column(0));
    let kappa_hat = (quad / n as f64).max(KAPPA_FLOOR);
    let log_det = lr.log_det();
    let nf = n as f64;
    let value = -0.5 * nf * kappa_hat.ln() - 0.5 * log_det - 0.5 * nf;
    Ok(PseudoLikelihood {
        value,
        kappa_hat,
        log_det,
        fitted,
        n_uncovered,
    })
}

/// Fits a fixed-`delta` forest and returns its pseudo-log-likelihood.
pub fn pseudo_log_likelihood(data: &LocatedDataset, delta: f64, params: &ForestParams) -> Result<f64> {
    if !(0.0..1.0).contains(&delta) {
        return Err(SpatialError::param(format!("delta must lie in [0, 1), got {delta}")));
    }
    let (_, rows) = shared_basis(data, params)?;
    let forest = fit_fixed_delta(data, delta, params)?;
    Ok(evaluate_pseudo_likelihood(&forest, data, &rows, delta)?.value)
}

/// Index of the best value; ties go to the earlier (smaller `delta`) entry.
fn argbest(values: &[f64], maximize: bool) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        let better = if maximize { v > values[best] } else { v < values[best] };
        if better || values[best].is_nan() {
            best = i;
        }
    }
    best
}

/// SpatRF-PL: grid search on the pseudo-likelihood, then a global ridge
/// spatial effect on the bagged-tree residuals at the selected `delta`.
pub fn fit_sprf_pl(data: &LocatedDataset, params: &ForestParams) -> Result<(SpatialForest, DeltaProfile)> {
    params.validate_grid()?;
    let (basis, rows) = shared_basis(data, params)?;
    let mut values = Vec::with_capacity(params.delta_grid.len());
    let mut best: Option<(SpatialForest, PseudoLikelihood)> = None;
    for &delta in &params.delta_grid {
        let forest = fit_fixed_delta(data, delta, params)?;
        let pl = evaluate_pseudo_likelihood(&forest, data, &rows, delta)?;
        log::debug!("PL delta={delta:.3} l={:.4} kappa={:.4e}", pl.value, pl.kappa_hat);
        let improves = best.as_ref().is_none_or(|(_, b)| pl.value > b.value);
        values.push(pl.value);
        if improves {
            best = Some((forest, pl));
        }
    }
    let argbest = argbest(&values, true);
    let (mut forest, pl) = best.expect("grid is nonempty");
    let delta = params.delta_grid[argbest];
    let eta = if delta > 0.0 && rows.ncols() > 0 {
        let resid = data.response()? - &pl.fitted;
        ridge_solve(&rows, &resid, (1.0 - delta) / delta).as_slice().to_vec()
    } else {
        vec![0.0; rows.ncols()]
    };
    forest.variant = ForestVariant::PseudoLikelihood;
    forest.global = Some(GlobalEffect {
        basis,
        eta,
        kappa_hat: pl.kappa_hat,
    });
    Ok((
        forest,
        DeltaProfile {
            grid: params.delta_grid.clone(),
            criterion_values: values,
            argbest,
        },
    ))
}

/// SpatRF-NP: grid search on the OOB mean squared error of
/// tree-plus-spatial-effect predictions.
pub fn fit_sprf_np(data: &LocatedDataset, params: &ForestParams) -> Result<(SpatialForest, DeltaProfile)> {
    params.validate_grid()?;
    let z = data.response()?;
    let mut values = Vec::with_capacity(params.delta_grid.len());
    let mut best: Option<(SpatialForest, f64)> = None;
    for &delta in &params.delta_grid {
        let forest = fit_fixed_delta(data, delta, params)?;
        let oob = oob_predict(&forest, data, true)?;
        if oob.covered() < data.n() {
            log::warn!(
                "{} point(s) lack OOB trees and are excluded from the OOB error",
                data.n() - oob.covered()
            );
        }
        let mse = oob.mse(z);
        log::debug!("NP delta={delta:.3} oob_mse={mse:.5}");
        let improves = best.as_ref().is_none_or(|(_, b)| mse < *b);
        values.push(mse);
        if improves {
            best = Some((forest, mse));
        }
    }
    let argbest = argbest(&values, false);
    let (mut forest, _) = best.expect("grid is nonempty");
    forest.variant = ForestVariant::NonParametric;
    Ok((
        forest,
        DeltaProfile {
            grid: params.delta_grid.clone(),
            criterion_values: values,
            argbest,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    fn toy(n: usize, seed: u64) -> LocatedDataset {
        let mut rng = rng_from_seed(seed);
        let coords = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let x = DMatrix::from_fn(n, 3, |_, _| rng.random::<f64>());
        let z = DVector::from_fn(n, |i, _| 2.0 * x[(i, 0)] + (4.0 * coords[(i, 1)]).sin() + 0.2 * rng.random::<f64>());
        LocatedDataset::new(coords, x, Some(z)).unwrap()
    }

    fn small_params(seed: u64) -> ForestParams {
        let mut p = ForestParams::for_covariates(3);
        p.n_trees = 12;
        p.seed = seed;
        p.delta_grid = vec![0.0, 0.5];
        p
    }

    #[test]
    fn argbest_ties_prefer_first() {
        assert_eq!(argbest(&[1.0, 3.0, 3.0], true), 1);
        assert_eq!(argbest(&[2.0, 1.0, 1.0], false), 1);
        assert_eq!(argbest(&[5.0], false), 0);
    }

    #[test]
    fn grid_validation() {
        let mut p = small_params(0);
        p.delta_grid = vec![0.5, 0.2];
        assert!(p.validate_grid().is_err());
        p.delta_grid = vec![0.0, 1.0];
        assert!(p.validate_grid().is_err());
        p.delta_grid = vec![];
        assert!(p.validate_grid().is_err());
        assert_eq!(default_delta_grid().len(), 20);
        assert_eq!(*default_delta_grid().last().unwrap(), 0.95);
    }

    #[test]
    fn deterministic_forest() {
        let ds = toy(40, 1);
        let a = fit_fixed_delta(&ds, 0.3, &small_params(4)).unwrap();
        let b = fit_fixed_delta(&ds, 0.3, &small_params(4)).unwrap();
        assert_eq!(a, b);
        assert!(fit_fixed_delta(&ds.subset(&[0]), 0.0, &small_params(4)).is_err());
    }

    #[test]
    fn oob_reads_only_out_of_bag_members() {
        let bags: Vec<Vec<usize>> = vec![vec![0, 0, 1], vec![2, 3, 3], vec![0, 1, 2, 3]];
        let bag_refs: Vec<&[usize]> = bags.iter().map(|b| b.as_slice()).collect();
        let calls = Mutex::new(Vec::new());
        let oob = oob_aggregate(5, &bag_refs, |b, rows| {
            for &r in rows {
                assert!(!bags[b].contains(&r), "member {b} asked about in-bag row {r}");
            }
            calls.lock().unwrap().push((b, rows.to_vec()));
            Ok(rows.iter().map(|&r| (10 * b + r) as f64).collect())
        })
        .unwrap();
        assert_eq!(oob.n_oob_trees, vec![1, 1, 1, 1, 3]);
        assert_eq!(oob.predictions[0], Some(10.0));
        assert_eq!(oob.predictions[2], Some(2.0));
        assert_eq!(oob.predictions[4], Some((4.0 + 14.0 + 24.0) / 3.0));
        assert_eq!(calls.lock().unwrap().len(), 3);
    }

    #[test]
    fn single_tree_full_bag_has_no_oob() {
        let ds = toy(20, 2);
        let mut p = small_params(1);
        p.n_trees = 1;
        let forest = fit_fixed_delta(&ds, 0.0, &p).unwrap();
        let oob = oob_predict(&forest, &ds, true).unwrap();
        for (i, pred) in oob.predictions.iter().enumerate() {
            let in_bag = forest.trees[0].in_bag_indices.contains(&i);
            assert_eq!(pred.is_none(), in_bag);
            if let Some(v) = pred {
                let single = forest.trees[0]
                    .predict(&ds.x.select_rows([i].iter()), &ds.coords.select_rows([i].iter()), true)
                    .unwrap()[0];
                assert_eq!(*v, single);
            }
        }
    }

    #[test]
    fn pl_delta_zero_closed_form() {
        let ds = toy(30, 3);
        let params = small_params(2);
        let (_, rows) = shared_basis(&ds, &params).unwrap();
        let forest = fit_fixed_delta(&ds, 0.0, &params).unwrap();
        let pl = evaluate_pseudo_likelihood(&forest, &ds, &rows, 0.0).unwrap();
        let z = ds.response().unwrap();
        let n = 30.0;
        let rss = (z - &pl.fitted).norm_squared();
        let expected = -0.5 * n * (rss / n).ln() - 0.5 * n;
        assert!((pl.value - expected).abs() < 1e-10);
    }

    #[test]
    fn constant_response_is_guarded() {
        let mut ds = toy(25, 4);
        ds.z = Some(DVector::from_element(25, 3.0));
        for delta in [0.0, 0.5] {
            let v = pseudo_log_likelihood(&ds, delta, &small_params(0)).unwrap();
            assert!(v.is_finite());
            assert!(v > 100.0);
        }
    }

    #[test]
    fn single_point_grid() {
        let ds = toy(30, 5);
        let mut params = small_params(3);
        params.delta_grid = vec![0.5];
        let (forest, profile) = fit_sprf_pl(&ds, &params).unwrap();
        assert_eq!(profile.selected(), 0.5);
        assert_eq!(forest.delta_selected, 0.5);
        let (forest, profile) = fit_sprf_np(&ds, &params).unwrap();
        assert_eq!(profile.selected(), 0.5);
        assert_eq!(forest.variant, ForestVariant::NonParametric);
    }

    #[test]
    fn np_grid_zero_matches_fixed() {
        let ds = toy(30, 6);
        let mut params = small_params(7);
        params.delta_grid = vec![0.0];
        let (np, profile) = fit_sprf_np(&ds, &params).unwrap();
        let fixed = fit_fixed_delta(&ds, 0.0, &params).unwrap();
        assert_eq!(np.predict(&ds.x, &ds.coords).unwrap(), fixed.predict(&ds.x, &ds.coords).unwrap());
        let oob = oob_predict(&fixed, &ds, false).unwrap();
        assert_eq!(profile.criterion_values[0], oob.mse(ds.response().unwrap()));
    }

    #[test]
    fn np_criterion_is_minimal_at_selection() {
        let ds = toy(40, 8);
        let mut params = small_params(9);
        params.delta_grid = vec![0.0, 0.3, 0.6, 0.9];
        let (_, profile) = fit_sprf_np(&ds, &params).unwrap();
        let best = profile.criterion_values[profile.argbest];
        assert!(profile.criterion_values.iter().all(|&v| best <= v));
    }

    #[test]
    fn pl_with_zero_effect_is_bagged_trees() {
        let ds = toy(30, 10);
        let params = small_params(1);
        let (mut forest, _) = fit_sprf_pl(&ds, &params).unwrap();
        let global = forest.global.as_mut().unwrap();
        global.eta.iter_mut().for_each(|e| *e = 0.0);
        assert_eq!(
            forest.predict(&ds.x, &ds.coords).unwrap(),
            forest.predict_trees(&ds.x, &ds.coords, false).unwrap()
        );
    }
}
