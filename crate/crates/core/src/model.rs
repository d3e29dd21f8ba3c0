//! One entry point for every fitting method, and a serialisable wrapper for
//! whatever was fitted.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    fit_random_forest, fit_rf_with_basis_covariates, fit_smoother, fit_two_step, BasisForest, SmootherModel,
    SmootherParams, SpatialModel, TwoStepModel, TwoStepOrder,
};
use crate::data::LocatedDataset;
use crate::error::{Result, SpatialError};
use crate::forest::{default_delta_grid, fit_sprf_np, fit_sprf_pl, DeltaProfile, ForestParams, KnotStrategy, SpatialForest};
use crate::geometry::BasisConfig;
use crate::rng::derive_seed;
use crate::tree::TreeParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rf,
    Smoother,
    RfSmooth,
    SmoothRf,
    RfBasis,
    SprfPl,
    SprfNp,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Rf,
        Method::Smoother,
        Method::RfSmooth,
        Method::SmoothRf,
        Method::RfBasis,
        Method::SprfPl,
        Method::SprfNp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Rf => "rf",
            Method::Smoother => "smoother",
            Method::RfSmooth => "rf-smooth",
            Method::SmoothRf => "smooth-rf",
            Method::RfBasis => "rf-basis",
            Method::SprfPl => "sprf-pl",
            Method::SprfNp => "sprf-np",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = SpatialError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| SpatialError::param(format!("unknown method '{s}'")))
    }
}

/// Hyperparameters shared by all methods. `None` fields take the
/// data-dependent defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub n_trees: usize,
    pub mtry: Option<usize>,
    pub min_node_size: usize,
    pub basis: BasisConfig,
    pub delta_grid: Vec<f64>,
    pub knots: KnotStrategy,
    pub lambda_grid: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            n_trees: 200,
            mtry: None,
            min_node_size: 5,
            basis: BasisConfig::default(),
            delta_grid: default_delta_grid(),
            knots: KnotStrategy::PerBag,
            lambda_grid: None,
            seed: 0,
        }
    }
}

impl MethodConfig {
    pub fn forest_params(&self, p: usize) -> ForestParams {
        let mut tree = TreeParams::for_covariates(p);
        if let Some(m) = self.mtry {
            tree.mtry = m;
        }
        tree.min_node_size = self.min_node_size;
        tree.basis = self.basis.clone();
        ForestParams {
            n_trees: self.n_trees,
            tree,
            delta_grid: self.delta_grid.clone(),
            seed: derive_seed(self.seed, &[1]),
            knots: self.knots,
        }
    }

    pub fn smoother_params(&self) -> SmootherParams {
        SmootherParams {
            basis: self.basis.clone(),
            lambda_grid: self.lambda_grid.clone(),
            n_folds: 10,
            seed: derive_seed(self.seed, &[2]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedModel {
    Forest {
        forest: SpatialForest,
        profile: Option<DeltaProfile>,
    },
    Smoother(SmootherModel),
    TwoStep(TwoStepModel),
    BasisForest(BasisForest),
}

impl FittedModel {
    pub fn delta_profile(&self) -> Option<&DeltaProfile> {
        match self {
            FittedModel::Forest { profile, .. } => profile.as_ref(),
            _ => None,
        }
    }
}

impl SpatialModel for FittedModel {
    fn predict(&self, x: &DMatrix<f64>, coords: &DMatrix<f64>) -> Result<Vec<f64>> {
        match self {
            FittedModel::Forest { forest, .. } => forest.predict(x, coords),
            FittedModel::Smoother(m) => m.predict(x, coords),
            FittedModel::TwoStep(m) => m.predict(x, coords),
            FittedModel::BasisForest(m) => m.predict(x, coords),
        }
    }
}

pub fn fit_method(method: Method, data: &LocatedDataset, config: &MethodConfig) -> Result<FittedModel> {
    let rf = config.forest_params(data.p());
    let sm = config.smoother_params();
    Ok(match method {
        Method::Rf => FittedModel::Forest {
            forest: fit_random_forest(data, &rf)?,
            profile: None,
        },
        Method::Smoother => FittedModel::Smoother(fit_smoother(data, &sm)?),
        Method::RfSmooth => FittedModel::TwoStep(fit_two_step(data, TwoStepOrder::RfFirst, &rf, &sm)?),
        Method::SmoothRf => FittedModel::TwoStep(fit_two_step(data, TwoStepOrder::SmootherFirst, &rf, &sm)?),
        Method::RfBasis => FittedModel::BasisForest(fit_rf_with_basis_covariates(data, &rf, &config.basis)?),
        Method::SprfPl => {
            let (forest, profile) = fit_sprf_pl(data, &rf)?;
            FittedModel::Forest {
                forest,
                profile: Some(profile),
            }
        }
        Method::SprfNp => {
            let (forest, profile) = fit_sprf_np(data, &rf)?;
            FittedModel::Forest {
                forest,
                profile: Some(profile),
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("forest".parse::<Method>().is_err());
    }

    #[test]
    fn config_overrides_reach_trees() {
        let config = MethodConfig {
            mtry: Some(2),
            min_node_size: 3,
            ..Default::default()
        };
        let p = config.forest_params(9);
        assert_eq!(p.tree.mtry, 2);
        assert_eq!(p.tree.min_node_size, 3);
        assert_eq!(MethodConfig::default().forest_params(9).tree.mtry, 3);
    }
}
