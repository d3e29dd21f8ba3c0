use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SpatialError};

/// Observations at spatial locations: coordinates, covariates and (for
/// training data) the measured response.
#[derive(Debug, Clone, PartialEq)]
pub struct LocatedDataset {
    pub ids: Vec<String>,
    /// n x d planar coordinates.
    pub coords: DMatrix<f64>,
    /// n x p covariates.
    pub x: DMatrix<f64>,
    pub z: Option<DVector<f64>>,
    pub coord_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub response_name: Option<String>,
}

impl LocatedDataset {
    /// Builds a dataset with generated ids and column names.
    pub fn new(coords: DMatrix<f64>, x: DMatrix<f64>, z: Option<DVector<f64>>) -> Result<Self> {
        let n = coords.nrows();
        let ds = LocatedDataset {
            ids: (0..n).map(|i| i.to_string()).collect(),
            coord_names: (0..coords.ncols()).map(|c| format!("s{c}")).collect(),
            covariate_names: (0..x.ncols()).map(|c| format!("x{c}")).collect(),
            response_name: z.as_ref().map(|_| "z".to_string()),
            coords,
            x,
            z,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.coords.nrows();
        if n == 0 {
            return Err(SpatialError::Data("dataset has no rows".into()));
        }
        if self.x.nrows() != n || self.ids.len() != n {
            return Err(SpatialError::Dimension(format!(
                "coords have {n} rows, covariates {}, ids {}",
                self.x.nrows(),
                self.ids.len()
            )));
        }
        if let Some(z) = &self.z {
            if z.len() != n {
                return Err(SpatialError::Dimension(format!("response has {} rows, expected {n}", z.len())));
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(SpatialError::NonFinite("response".into()));
            }
        }
        if self.coords.iter().chain(self.x.iter()).any(|v| !v.is_finite()) {
            return Err(SpatialError::NonFinite("coordinates or covariates".into()));
        }
        if self.covariate_names.len() != self.x.ncols() || self.coord_names.len() != self.coords.ncols() {
            return Err(SpatialError::Dimension("column names do not match matrix widths".into()));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.coords.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn d(&self) -> usize {
        self.coords.ncols()
    }

    pub fn response(&self) -> Result<&DVector<f64>> {
        self.z
            .as_ref()
            .ok_or_else(|| SpatialError::Data("dataset has no response column".into()))
    }

    /// Rows `indices` (repeats allowed) as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> LocatedDataset {
        LocatedDataset {
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            coords: self.coords.select_rows(indices),
            x: self.x.select_rows(indices),
            z: self.z.as_ref().map(|z| z.select_rows(indices)),
            coord_names: self.coord_names.clone(),
            covariate_names: self.covariate_names.clone(),
            response_name: self.response_name.clone(),
        }
    }

    /// Same rows with the response replaced.
    pub fn with_response(&self, z: DVector<f64>) -> Result<LocatedDataset> {
        let mut out = self.clone();
        out.z = Some(z);
        if out.response_name.is_none() {
            out.response_name = Some("z".into());
        }
        out.validate()?;
        Ok(out)
    }
}

/// Out-of-sample `R^2 = 1 - SSE / SST` with SST about the mean of `actual`.
pub fn r_squared(actual: &[f64], predicted: &[f64]) -> f64 {
    assert_eq!(actual.len(), predicted.len());
    let n = actual.len() as f64;
    let mean = actual.iter().sum::<f64>() / n;
    let sse: f64 = actual.iter().zip(predicted).map(|(a, p)| (a - p).powi(2)).sum();
    let sst: f64 = actual.iter().map(|a| (a - mean).powi(2)).sum();
    1.0 - sse / sst
}

pub fn mean_squared_error(actual: &[f64], predicted: &[f64]) -> f64 {
    assert_eq!(actual.len(), predicted.len());
    actual.iter().zip(predicted).map(|(a, p)| (a - p).powi(2)).sum::<f64>() / actual.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r2_conventions() {
        let y = [1.0, 2.0, 4.0, 7.0];
        assert_eq!(r_squared(&y, &y), 1.0);
        let mean = [3.5; 4];
        assert!(r_squared(&y, &mean).abs() < 1e-15);
    }

    #[test]
    fn validation_errors() {
        let coords = DMatrix::zeros(3, 2);
        assert!(LocatedDataset::new(coords.clone(), DMatrix::zeros(2, 1), None).is_err());
        let z = DVector::from_vec(vec![1.0, f64::NAN, 0.0]);
        assert!(LocatedDataset::new(coords.clone(), DMatrix::zeros(3, 1), Some(z)).is_err());
        assert!(LocatedDataset::new(DMatrix::zeros(0, 2), DMatrix::zeros(0, 1), None).is_err());
        let ds = LocatedDataset::new(coords, DMatrix::zeros(3, 1), None).unwrap();
        assert!(ds.response().is_err());
        let sub = ds.subset(&[2, 2, 0]);
        assert_eq!(sub.ids, vec!["2", "2", "0"]);
    }
}
