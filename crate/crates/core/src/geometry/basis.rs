use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::knots::{distinct_rows, select_knots, squared_distance, KnotSet};
use crate::error::{Result, SpatialError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    /// `r^2 log r`, zero at the knot.
    #[default]
    ThinPlate,
    /// `exp(-r^2 / (2 scale^2))`.
    GaussianRbf,
}

/// How a basis is constructed from a set of locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisConfig {
    pub kind: BasisKind,
    /// Number of knots; `None` uses `min(50, n / 4)`.
    pub n_knots: Option<usize>,
    /// Gaussian RBF length scale; `None` uses the mean nearest-knot spacing.
    pub scale: Option<f64>,
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig {
            kind: BasisKind::ThinPlate,
            n_knots: None,
            scale: None,
        }
    }
}

pub fn default_knot_count(n: usize) -> usize {
    (n / 4).clamp(1, 50)
}

/// Radial basis functions centred at knots, with the column scaling fixed at
/// construction time so that new locations are evaluated on the training scale.
///
/// Training columns are scaled to unit root-mean-square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialBasis {
    pub knot_set: KnotSet,
    pub kind: BasisKind,
    pub scale: f64,
    pub column_norms: Vec<f64>,
}

fn radial(kind: BasisKind, scale: f64, sq_dist: f64) -> f64 {
    match kind {
        BasisKind::ThinPlate => {
            if sq_dist > 0.0 {
                0.5 * sq_dist * sq_dist.ln()
            } else {
                0.0
            }
        }
        BasisKind::GaussianRbf => (-sq_dist / (2.0 * scale * scale)).exp(),
    }
}

fn raw_matrix(locations: &DMatrix<f64>, knots: &DMatrix<f64>, kind: BasisKind, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(locations.nrows(), knots.nrows(), |i, j| {
        radial(kind, scale, squared_distance(locations, i, knots, j))
    })
}

fn check_finite(locations: &DMatrix<f64>) -> Result<()> {
    if locations.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SpatialError::NonFinite("location coordinates".into()))
    }
}

/// Mean distance from each knot to its nearest neighbour among the knots.
pub fn default_rbf_scale(knots: &DMatrix<f64>) -> f64 {
    let k = knots.nrows();
    if k < 2 {
        return 1.0;
    }
    let total: f64 = (0..k)
        .map(|i| {
            (0..k)
                .filter(|&j| j != i)
                .map(|j| squared_distance(knots, i, knots, j))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    total / k as f64
}

/// Evaluates the radial functions at `locations` and fixes the column scaling.
/// Columns whose training norm vanishes are dropped together with their knot.
pub fn build_basis(
    locations: &DMatrix<f64>,
    knot_set: &KnotSet,
    kind: BasisKind,
    scale: f64,
) -> Result<(SpatialBasis, DMatrix<f64>)> {
    let n = locations.nrows();
    if n == 0 {
        return Err(SpatialError::param("cannot build a basis on zero locations"));
    }
    if kind == BasisKind::GaussianRbf && !(scale > 0.0 && scale.is_finite()) {
        return Err(SpatialError::param(format!("gaussian rbf scale must be positive, got {scale}")));
    }
    if locations.ncols() != knot_set.dim() {
        return Err(SpatialError::Dimension(format!(
            "locations have {} coordinates, knots have {}",
            locations.ncols(),
            knot_set.dim()
        )));
    }
    check_finite(locations)?;

    let raw = raw_matrix(locations, &knot_set.knots, kind, scale);
    let rms: Vec<f64> = raw
        .column_iter()
        .map(|c| (c.norm_squared() / n as f64).sqrt())
        .collect();
    let max_rms = rms.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..rms.len())
        .filter(|&j| rms[j] > 1e-12 * max_rms && rms[j].is_finite())
        .collect();
    if keep.len() < rms.len() {
        log::warn!(
            "dropping {} degenerate basis column(s) with zero norm",
            rms.len() - keep.len()
        );
    }
    let k = keep.len();
    let column_norms: Vec<f64> = keep.iter().map(|&j| rms[j]).collect();
    let knots = DMatrix::from_fn(k, knot_set.dim(), |r, c| knot_set.knots[(keep[r], c)]);
    let s = DMatrix::from_fn(n, k, |i, j| raw[(i, keep[j])] / column_norms[j]);
    let basis = SpatialBasis {
        knot_set: KnotSet {
            knots,
            selection_seed: knot_set.selection_seed,
        },
        kind,
        scale,
        column_norms,
    };
    Ok((basis, s))
}

impl SpatialBasis {
    /// Selects knots among `locations` and builds the basis on them.
    pub fn fit(locations: &DMatrix<f64>, config: &BasisConfig, seed: u64) -> Result<(Self, DMatrix<f64>)> {
        let distinct = distinct_rows(locations).len();
        let k = config
            .n_knots
            .unwrap_or_else(|| default_knot_count(locations.nrows()))
            .min(distinct)
            .max(1);
        let knots = select_knots(locations, k, seed)?;
        let scale = match config.kind {
            BasisKind::ThinPlate => config.scale.unwrap_or(1.0),
            BasisKind::GaussianRbf => config.scale.unwrap_or_else(|| default_rbf_scale(&knots.knots)),
        };
        build_basis(locations, &knots, config.kind, scale)
    }

    pub fn n_columns(&self) -> usize {
        self.column_norms.len()
    }

    pub fn dim(&self) -> usize {
        self.knot_set.dim()
    }

    /// Basis rows for new locations using the stored training scaling.
    pub fn evaluate(&self, locations: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if locations.nrows() > 0 && locations.ncols() != self.dim() {
            return Err(SpatialError::Dimension(format!(
                "locations have {} coordinates, basis expects {}",
                locations.ncols(),
                self.dim()
            )));
        }
        check_finite(locations)?;
        let raw = raw_matrix(locations, &self.knot_set.knots, self.kind, self.scale);
        Ok(DMatrix::from_fn(locations.nrows(), self.n_columns(), |i, j| {
            raw[(i, j)] / self.column_norms[j]
        }))
    }
}

/// Free-function form of [`SpatialBasis::evaluate`].
pub fn evaluate_basis_at(basis: &SpatialBasis, new_locations: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    basis.evaluate(new_locations)
}
