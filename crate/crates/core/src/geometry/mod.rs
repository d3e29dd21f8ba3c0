//! Spatial bases, low-rank correlation structures and dense exponential
//! covariances.

mod basis;
mod covariance;
mod knots;
mod lowrank;

pub use basis::{build_basis, default_knot_count, default_rbf_scale, evaluate_basis_at, BasisConfig, BasisKind, SpatialBasis};
pub use covariance::{exponential_covariance, gaussian_covariance, sample_gp, CovarianceParams, DenseCovariance};
pub use knots::{select_knots, KnotSet};
pub use lowrank::{low_rank_inverse_apply, low_rank_log_det, LowRankCorrelation};
