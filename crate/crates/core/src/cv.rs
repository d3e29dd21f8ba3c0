//! Repeated k-fold cross-validation with pooled out-of-fold R^2.

use serde::Serialize;

use crate::baselines::{assign_folds, SpatialModel};
use crate::data::{r_squared, LocatedDataset};
use crate::error::{Result, SpatialError};
use crate::model::{fit_method, Method, MethodConfig};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvResult {
    /// Pooled R^2 per repeat; `None` when a fold fit failed.
    pub repeat_r2: Vec<Option<f64>>,
    /// Mean over successful repeats (NaN if none succeeded).
    pub mean_r2: f64,
}

/// Disjoint folds covering `0..n`, as index lists.
pub fn partition_folds(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let assignment = assign_folds(n, k, seed);
    let mut folds = vec![Vec::new(); k];
    for (i, f) in assignment.into_iter().enumerate() {
        folds[f].push(i);
    }
    folds
}

pub fn cross_validate(
    data: &LocatedDataset,
    method: Method,
    config: &MethodConfig,
    k_folds: usize,
    n_repeats: usize,
    seed: u64,
) -> Result<CvResult> {
    cross_validate_with(data, k_folds, n_repeats, seed, &|train, test, fit_seed| {
        let config = MethodConfig {
            seed: fit_seed,
            ..config.clone()
        };
        fit_method(method, train, &config)?.predict(&test.x, &test.coords)
    })
}

/// Cross-validation of an arbitrary fit-and-predict routine.
pub fn cross_validate_with(
    data: &LocatedDataset,
    k_folds: usize,
    n_repeats: usize,
    seed: u64,
    fit_predict: &dyn Fn(&LocatedDataset, &LocatedDataset, u64) -> Result<Vec<f64>>,
) -> Result<CvResult> {
    let n = data.n();
    if k_folds < 2 {
        return Err(SpatialError::param("cross-validation needs at least two folds"));
    }
    if n < k_folds {
        return Err(SpatialError::param(format!("{n} observations cannot fill {k_folds} folds")));
    }
    if n_repeats == 0 {
        return Err(SpatialError::param("at least one repeat is required"));
    }
    let z = data.response()?;
    let mut repeat_r2 = Vec::with_capacity(n_repeats);
    for r in 0..n_repeats {
        let repeat_seed = derive_seed(seed, &[r as u64]);
        let folds = partition_folds(n, k_folds, derive_seed(repeat_seed, &[0]));
        let mut pooled = vec![0.0; n];
        let mut failed = false;
        for (f, test_idx) in folds.iter().enumerate() {
            let train_idx: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, idx)| idx.iter().copied())
                .collect();
            let train = data.subset(&train_idx);
            let test = data.subset(test_idx);
            match fit_predict(&train, &test, derive_seed(repeat_seed, &[1 + f as u64])) {
                Ok(preds) if preds.len() == test_idx.len() => {
                    for (&i, p) in test_idx.iter().zip(preds) {
                        pooled[i] = p;
                    }
                }
                Ok(_) => {
                    log::warn!("repeat {r} fold {f}: prediction count mismatch");
                    failed = true;
                    break;
                }
                Err(e) => {
                    log::warn!("repeat {r} fold {f} failed: {e}");
                    failed = true;
                    break;
                }
            }
        }
        repeat_r2.push((!failed).then(|| r_squared(z.as_slice(), &pooled)));
    }
    let ok: Vec<f64> = repeat_r2.iter().flatten().copied().collect();
    let mean_r2 = if ok.is_empty() {
        f64::NAN
    } else {
        ok.iter().sum::<f64>() / ok.len() as f64
    };
    Ok(CvResult { repeat_r2, mean_r2 })
}
