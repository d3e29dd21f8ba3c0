use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::knots::squared_distance;
use crate::error::{Result, SpatialError};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceParams {
    pub sill: f64,
    pub range: f64,
    pub nugget: f64,
}

#[derive(Debug, Clone)]
pub struct DenseCovariance {
    pub matrix: DMatrix<f64>,
    pub params: CovarianceParams,
}

/// `sill * exp(-d / range) + nugget * 1{i = j}` over all location pairs.
pub fn exponential_covariance(
    locations: &DMatrix<f64>,
    sill: f64,
    range: f64,
    nugget: f64,
) -> Result<DenseCovariance> {
    if !(sill > 0.0) || !(range > 0.0) || !(nugget >= 0.0) {
        return Err(SpatialError::param(format!(
            "exponential covariance needs sill > 0, range > 0, nugget >= 0 (got {sill}, {range}, {nugget})"
        )));
    }
    if locations.iter().any(|v| !v.is_finite()) {
        return Err(SpatialError::NonFinite("location coordinates".into()));
    }
    let n = locations.nrows();
    let mut matrix = DMatrix::zeros(n, n);
    for j in 0..n {
        matrix[(j, j)] = sill + nugget;
        for i in (j + 1)..n {
            let d = squared_distance(locations, i, locations, j).sqrt();
            let v = sill * (-d / range).exp();
            matrix[(i, j)] = v;
            matrix[(j, i)] = v;
        }
    }
    Ok(DenseCovariance {
        matrix,
        params: CovarianceParams { sill, range, nugget },
    })
}

/// Squared-exponential covariance
/// `sill * exp(-d^2 / (2 range^2)) + nugget * 1{i = j}`, for smooth fields.
pub fn gaussian_covariance(
    locations: &DMatrix<f64>,
    sill: f64,
    range: f64,
    nugget: f64,
) -> Result<DenseCovariance> {
    if !(sill > 0.0) || !(range > 0.0) || !(nugget >= 0.0) {
        return Err(SpatialError::param(format!(
            "gaussian covariance needs sill > 0, range > 0, nugget >= 0 (got {sill}, {range}, {nugget})"
        )));
    }
    if locations.iter().any(|v| !v.is_finite()) {
        return Err(SpatialError::NonFinite("location coordinates".into()));
    }
    let n = locations.nrows();
    let mut matrix = DMatrix::zeros(n, n);
    for j in 0..n {
        matrix[(j, j)] = sill + nugget;
        for i in (j + 1)..n {
            let d2 = squared_distance(locations, i, locations, j);
            let v = sill * (-d2 / (2.0 * range * range)).exp();
            matrix[(i, j)] = v;
            matrix[(j, i)] = v;
        }
    }
    Ok(DenseCovariance {
        matrix,
        params: CovarianceParams { sill, range, nugget },
    })
}

/// Draws one realisation from `N(0, cov)` as `L z` with `L L' = cov`.
pub fn sample_gp(cov: &DenseCovariance, seed: u64) -> Result<DVector<f64>> {
    sample_gaussian(&cov.matrix, seed)
}

pub(crate) fn sample_gaussian(matrix: &DMatrix<f64>, seed: u64) -> Result<DVector<f64>> {
    let n = matrix.nrows();
    if matrix.iter().all(|&v| v == 0.0) {
        return Ok(DVector::zeros(n));
    }
    let chol = matrix
        .clone()
        .cholesky()
        .ok_or(SpatialError::NotPositiveDefinite)?;
    let mut rng = rng_from_seed(seed);
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(chol.l() * z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries() {
        let locs = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 3.0, 0.0]);
        let cov = exponential_covariance(&locs, 2.0, 1.5, 0.0).unwrap();
        assert!((cov.matrix[(0, 1)] - 2.0 * (-2.0f64).exp()).abs() < 1e-15);
        assert!((cov.matrix[(0, 1)] - 0.2707).abs() < 1e-4);
        let cov = exponential_covariance(&locs, 2.0, 3.0, 0.5).unwrap();
        assert_eq!(cov.matrix[(0, 0)], 2.5);
        assert!((cov.matrix[(1, 0)] - 2.0 * (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn gaussian_entries() {
        let locs = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]);
        let cov = gaussian_covariance(&locs, 1.5, 1.0, 0.25).unwrap();
        assert!((cov.matrix[(0, 1)] - 1.5 * (-2.0f64).exp()).abs() < 1e-15);
        assert_eq!(cov.matrix[(1, 1)], 1.75);
        assert!(gaussian_covariance(&locs, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn symmetric_and_positive_definite() {
        let mut rng = rng_from_seed(9);
        let locs = DMatrix::from_fn(40, 2, |_, _| rng.random::<f64>());
        let cov = exponential_covariance(&locs, 1.0, 0.2, 0.1).unwrap();
        assert_eq!(cov.matrix, cov.matrix.transpose());
        assert!(cov.matrix.clone().cholesky().is_some());
    }

    #[test]
    fn rejects_bad_parameters() {
        let locs = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        assert!(exponential_covariance(&locs, 0.0, 1.0, 0.0).is_err());
        assert!(exponential_covariance(&locs, 1.0, -1.0, 0.0).is_err());
        let bad = DMatrix::from_row_slice(1, 2, &[f64::NAN, 0.0]);
        assert!(matches!(
            exponential_covariance(&bad, 1.0, 1.0, 0.0),
            Err(SpatialError::NonFinite(_))
        ));
    }

    #[test]
    fn zero_covariance_gives_zero_draw() {
        let cov = DenseCovariance {
            matrix: DMatrix::zeros(3, 3),
            params: CovarianceParams {
                sill: 0.0,
                range: 1.0,
                nugget: 0.0,
            },
        };
        assert_eq!(sample_gp(&cov, 1).unwrap(), DVector::zeros(3));
        let locs = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let tiny = exponential_covariance(&locs, 1e-300, 1.0, 0.0).unwrap();
        assert!(sample_gp(&tiny, 1).unwrap().amax() < 1e-140);
    }

    #[test]
    fn deterministic_and_calibrated() {
        let locs = DMatrix::from_row_slice(1, 2, &[0.3, 0.4]);
        let cov = exponential_covariance(&locs, 1.0, 1.0, 0.0).unwrap();
        assert_eq!(sample_gp(&cov, 5).unwrap(), sample_gp(&cov, 5).unwrap());
        let draws: Vec<f64> = (0..10_000).map(|s| sample_gp(&cov, s).unwrap()[0]).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((var - 1.0).abs() < 0.05, "sample variance {var}");
    }

    #[test]
    fn indefinite_matrix_fails() {
        let cov = DenseCovariance {
            matrix: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
            params: CovarianceParams {
                sill: 1.0,
                range: 1.0,
                nugget: 0.0,
            },
        };
        assert!(matches!(sample_gp(&cov, 0), Err(SpatialError::NotPositiveDefinite)));
    }
}
