//! Synthetic exposure surfaces `Y(s) = gamma f(X) + nu(s)` and the
//! method-comparison experiment run on them.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::SpatialModel;
use crate::data::{r_squared, LocatedDataset};
use crate::error::{Result, SpatialError};
use crate::geometry::{exponential_covariance, sample_gp};
use crate::model::{fit_method, Method, MethodConfig};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Strong,
    Weak,
}

impl Scenario {
    /// Target share of the truth's variance explained by the covariate term.
    pub fn covariate_share(self) -> f64 {
        match self {
            Scenario::Strong => 0.65,
            Scenario::Weak => 0.35,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Strong => "strong",
            Scenario::Weak => "weak",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// Three random columns with unit coefficients.
    SparseLinear,
    /// All columns with standard normal coefficients.
    DenseLinear,
    /// Dense linear plus three random pairwise products.
    Interactions,
}

impl Generator {
    pub const ALL: [Generator; 3] = [Generator::SparseLinear, Generator::DenseLinear, Generator::Interactions];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSpec {
    pub scenario: Scenario,
    /// Share of variance due to covariates; normally the scenario's target.
    pub covariate_share: f64,
    /// GP range as a fraction of the maximum inter-point distance, in [0.10, 0.20].
    pub range_fraction: f64,
    /// Measurement-noise variance as a fraction of the truth's variance, in [0.10, 0.25].
    pub noise_fraction: f64,
    pub generator: Generator,
    pub seed: u64,
}

impl SurfaceSpec {
    /// Draws range and noise fractions uniformly from their intervals.
    pub fn draw(scenario: Scenario, generator: Generator, seed: u64) -> Self {
        let mut rng = rng_from_seed(derive_seed(seed, &[0]));
        SurfaceSpec {
            scenario,
            covariate_share: scenario.covariate_share(),
            range_fraction: rng.random_range(0.10..=0.20),
            noise_fraction: rng.random_range(0.10..=0.25),
            generator,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.covariate_share) {
            return Err(SpatialError::param("covariate share must lie in [0, 1)"));
        }
        if !(0.10..=0.20).contains(&self.range_fraction) {
            return Err(SpatialError::param("range fraction must lie in [0.10, 0.20]"));
        }
        if !(0.0..=0.25).contains(&self.noise_fraction) {
            return Err(SpatialError::param("noise fraction must lie in [0, 0.25]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedSurface {
    pub locations: DMatrix<f64>,
    /// Covariates actually used (constant columns removed).
    pub covariates: DMatrix<f64>,
    pub truth: DVector<f64>,
    /// `gamma * f(X)` after standardisation of `f`.
    pub covariate_part: DVector<f64>,
    /// Standardised `nu(s)`.
    pub spatial_part: DVector<f64>,
    pub gamma: f64,
    pub spec: SurfaceSpec,
}

impl GeneratedSurface {
    pub fn n(&self) -> usize {
        self.truth.len()
    }

    /// Empirical `Var(gamma f) / Var(Y)`.
    pub fn covariate_share(&self) -> f64 {
        variance(self.covariate_part.as_slice()) / variance(self.truth.as_slice())
    }
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

fn standardize(v: &DVector<f64>) -> Option<DVector<f64>> {
    let mean = v.mean();
    let sd = variance(v.as_slice()).sqrt();
    if !(sd > 1e-12 * (1.0 + mean.abs())) {
        return None;
    }
    Some(v.map(|x| (x - mean) / sd))
}

/// Regular `side x side` grid on the unit square, row-major.
pub fn unit_square_grid(side: usize) -> DMatrix<f64> {
    let step = if side > 1 { 1.0 / (side - 1) as f64 } else { 0.0 };
    DMatrix::from_fn(side * side, 2, |i, c| {
        let (r, col) = (i / side, i % side);
        if c == 0 {
            col as f64 * step
        } else {
            r as f64 * step
        }
    })
}

/// Standardised synthetic covariates: the first half are smooth random
/// Fourier surfaces of the location, the rest white noise.
pub fn synthetic_covariates(locations: &DMatrix<f64>, p: usize, seed: u64) -> DMatrix<f64> {
    let n = locations.nrows();
    let d = locations.ncols();
    let n_smooth = p / 2 + p % 2;
    let mut x = DMatrix::zeros(n, p);
    for j in 0..p {
        let mut rng = rng_from_seed(derive_seed(seed, &[j as u64]));
        let col = if j < n_smooth {
            let freq = rng.random_range(0.5..2.0);
            let waves: Vec<(Vec<f64>, f64)> = (0..6)
                .map(|_| {
                    let w: Vec<f64> = (0..d).map(|_| freq * rng.sample::<f64, _>(StandardNormal)).collect();
                    (w, rng.random_range(0.0..2.0 * PI))
                })
                .collect();
            DVector::from_fn(n, |i, _| {
                waves
                    .iter()
                    .map(|(w, phase)| {
                        let arg: f64 = (0..d).map(|c| w[c] * locations[(i, c)]).sum();
                        (2.0 * PI * arg + phase).cos()
                    })
                    .sum()
            })
        } else {
            DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
        };
        let col = standardize(&col).unwrap_or(col);
        x.set_column(j, &col);
    }
    x
}

fn max_distance(locations: &DMatrix<f64>) -> f64 {
    let n = locations.nrows();
    let mut best: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            best = best.max((locations.row(i) - locations.row(j)).norm());
        }
    }
    best
}

fn covariate_function(x: &DMatrix<f64>, generator: Generator, seed: u64) -> DVector<f64> {
    let (n, p) = x.shape();
    let mut rng = rng_from_seed(derive_seed(seed, &[1]));
    let dense = |rng: &mut crate::rng::SpatialRng| -> DVector<f64> {
        let beta = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        x * beta
    };
    match generator {
        Generator::SparseLinear => {
            let cols = sample(&mut rng, p, p.min(3));
            DVector::from_fn(n, |i, _| cols.iter().map(|j| x[(i, j)]).sum())
        }
        Generator::DenseLinear => dense(&mut rng),
        Generator::Interactions => {
            let mut f = dense(&mut rng);
            if p >= 2 {
                for _ in 0..3 {
                    let pair = sample(&mut rng, p, 2);
                    let (a, b) = (pair.index(0), pair.index(1));
                    for i in 0..n {
                        f[i] += x[(i, a)] * x[(i, b)];
                    }
                }
            }
            f
        }
    }
}

/// `gamma` solving `gamma^2 / (gamma^2 + 1 + 2 rho gamma) = share` for
/// standardised components with correlation `rho`.
fn mixing_weight(share: f64, rho: f64) -> f64 {
    if share == 0.0 {
        return 0.0;
    }
    let a = 1.0 - share;
    let b = -2.0 * share * rho;
    let c = -share;
    (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a)
}

pub fn generate_surface(
    spec: &SurfaceSpec,
    locations: &DMatrix<f64>,
    covariates: &DMatrix<f64>,
) -> Result<GeneratedSurface> {
    spec.validate()?;
    let n = locations.nrows();
    if covariates.nrows() != n {
        return Err(SpatialError::Dimension("covariates and locations differ in rows".into()));
    }
    let keep: Vec<usize> = (0..covariates.ncols())
        .filter(|&j| {
            let col = covariates.column(j);
            let constant = col.iter().all(|&v| v == col[0]);
            if constant {
                log::warn!("covariate column {j} is constant and is dropped");
            }
            !constant
        })
        .collect();
    if keep.is_empty() {
        return Err(SpatialError::Data("no non-constant covariate columns".into()));
    }
    let x = covariates.select_columns(&keep);

    let f = covariate_function(&x, spec.generator, spec.seed);
    let f = standardize(&f).ok_or_else(|| SpatialError::Data("covariate function is constant".into()))?;
    let range = spec.range_fraction * max_distance(locations);
    let cov = exponential_covariance(locations, 1.0, range, 0.0)?;
    let nu = sample_gp(&cov, derive_seed(spec.seed, &[2]))?;
    let nu = standardize(&nu).ok_or_else(|| SpatialError::Data("spatial field is constant".into()))?;

    let rho = f.dot(&nu) / n as f64;
    let gamma = mixing_weight(spec.covariate_share, rho);
    let covariate_part = &f * gamma;
    let truth = &covariate_part + &nu;
    Ok(GeneratedSurface {
        locations: locations.clone(),
        covariates: x,
        truth,
        covariate_part,
        spatial_part: nu,
        gamma,
        spec: spec.clone(),
    })
}

/// Disjoint random training and validation draws. Training responses get
/// i.i.d. normal noise with variance `noise_fraction * Var(truth)`;
/// validation responses are the noiseless truth.
pub fn sample_train_validate(
    surface: &GeneratedSurface,
    n_train: usize,
    n_validate: usize,
    noise_fraction: f64,
    seed: u64,
) -> Result<(LocatedDataset, LocatedDataset)> {
    let n = surface.n();
    if n_train + n_validate > n {
        return Err(SpatialError::InsufficientLocations {
            needed: n_train + n_validate,
            found: n,
        });
    }
    if !(noise_fraction >= 0.0) {
        return Err(SpatialError::param("noise fraction must be nonnegative"));
    }
    let mut rng = rng_from_seed(seed);
    let draw = sample(&mut rng, n, n_train + n_validate).into_vec();
    let (train_idx, val_idx) = draw.split_at(n_train);
    let sd = (noise_fraction * variance(surface.truth.as_slice())).sqrt();
    let build = |idx: &[usize], z: DVector<f64>| -> Result<LocatedDataset> {
        let mut ds = LocatedDataset::new(
            surface.locations.select_rows(idx),
            surface.covariates.select_rows(idx),
            Some(z),
        )?;
        ds.ids = idx.iter().map(|i| i.to_string()).collect();
        Ok(ds)
    };
    let z_train = DVector::from_fn(n_train, |i, _| {
        surface.truth[train_idx[i]] + sd * rng.sample::<f64, _>(StandardNormal)
    });
    let train = build(train_idx, z_train)?;
    let validate = build(val_idx, surface.truth.select_rows(val_idx))?;
    Ok((train, validate))
}

/// Fits on the training set and predicts at the validation inputs.
pub trait CellFitter: Sync {
    fn name(&self) -> String;
    fn fit_predict(&self, train: &LocatedDataset, validate: &LocatedDataset, seed: u64) -> Result<Vec<f64>>;
}

/// A library method with fixed hyperparameters.
pub struct MethodFitter {
    pub method: Method,
    pub config: MethodConfig,
}

impl CellFitter for MethodFitter {
    fn name(&self) -> String {
        self.method.name().to_string()
    }

    fn fit_predict(&self, train: &LocatedDataset, validate: &LocatedDataset, seed: u64) -> Result<Vec<f64>> {
        let config = MethodConfig {
            seed,
            ..self.config.clone()
        };
        fit_method(self.method, train, &config)?.predict(&validate.x, &validate.coords)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_surfaces: usize,
    pub n_replicates: usize,
    pub scenarios: Vec<Scenario>,
    pub methods: Vec<Method>,
    pub method_config: MethodConfig,
    pub n_train: usize,
    pub n_validate: usize,
    pub grid_side: usize,
    pub n_covariates: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_surfaces: 20,
            n_replicates: 5,
            scenarios: vec![Scenario::Strong, Scenario::Weak],
            methods: Method::ALL.to_vec(),
            method_config: MethodConfig::default(),
            n_train: 150,
            n_validate: 200,
            grid_side: 25,
            n_covariates: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub surface_id: usize,
    pub replicate: usize,
    pub method: String,
    pub scenario: Scenario,
    /// `None` when the fit failed.
    pub r2: Option<f64>,
    #[serde(skip)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub scenario: Scenario,
    pub mean_r2: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub cells: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentResult {
    pub fn mean_r2(&self, method: &str, scenario: Scenario) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.method == method && r.scenario == scenario)
            .map(|r| r.mean_r2)
    }

    pub fn write_results_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for c in &self.cells {
            w.serialize(c)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.summary {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The surface for `(scenario, surface_id)`. Both scenarios share the
/// covariates, `f` and `nu` of a surface id and differ only in mixing.
pub fn experiment_surface(config: &ExperimentConfig, scenario: Scenario, surface_id: usize) -> Result<GeneratedSurface> {
    let seed = derive_seed(config.seed, &[0, surface_id as u64]);
    let locations = unit_square_grid(config.grid_side);
    let covariates = synthetic_covariates(&locations, config.n_covariates, derive_seed(seed, &[3]));
    let generator = Generator::ALL[surface_id % Generator::ALL.len()];
    generate_surface(&SurfaceSpec::draw(scenario, generator, seed), &locations, &covariates)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let fitters: Vec<MethodFitter> = config
        .methods
        .iter()
        .map(|&method| MethodFitter {
            method,
            config: config.method_config.clone(),
        })
        .collect();
    let refs: Vec<&dyn CellFitter> = fitters.iter().map(|f| f as &dyn CellFitter).collect();
    run_experiment_with(config, &refs)
}

/// As [`run_experiment`] with arbitrary fitters. Cells run concurrently;
/// each depends only on its derived seeds, and results keep a fixed order.
pub fn run_experiment_with(config: &ExperimentConfig, fitters: &[&dyn CellFitter]) -> Result<ExperimentResult> {
    if fitters.is_empty() {
        return Err(SpatialError::param("at least one method is required"));
    }
    if config.scenarios.is_empty() || config.n_surfaces == 0 || config.n_replicates == 0 {
        return Err(SpatialError::param("experiment needs scenarios, surfaces and replicates"));
    }
    let mut jobs = Vec::new();
    for &scenario in &config.scenarios {
        for s in 0..config.n_surfaces {
            for r in 0..config.n_replicates {
                jobs.push((scenario, s, r));
            }
        }
    }
    let surfaces: Vec<Result<GeneratedSurface>> = config
        .scenarios
        .iter()
        .flat_map(|&sc| (0..config.n_surfaces).map(move |s| (sc, s)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(sc, s)| experiment_surface(config, sc, s))
        .collect();

    let cells: Vec<Vec<CellResult>> = jobs
        .par_iter()
        .map(|&(scenario, s, r)| {
            let sc_index = config.scenarios.iter().position(|&x| x == scenario).expect("listed");
            let surface = &surfaces[sc_index * config.n_surfaces + s];
            let split = surface.as_ref().map_err(|e| e.to_string()).and_then(|surface| {
                sample_train_validate(
                    surface,
                    config.n_train,
                    config.n_validate,
                    surface.spec.noise_fraction,
                    derive_seed(config.seed, &[1, s as u64, r as u64]),
                )
                .map_err(|e| e.to_string())
            });
            let fit_seed = derive_seed(config.seed, &[2, s as u64, r as u64]);
            fitters
                .iter()
                .map(|fitter| {
                    let outcome = split.clone().and_then(|(train, validate)| {
                        let preds = fitter.fit_predict(&train, &validate, fit_seed).map_err(|e| e.to_string())?;
                        if preds.len() != validate.n() || preds.iter().any(|p| !p.is_finite()) {
                            return Err("non-finite or misshapen predictions".to_string());
                        }
                        Ok(r_squared(validate.response().expect("validation truth").as_slice(), &preds))
                    });
                    if let Err(e) = &outcome {
                        log::warn!("{} failed on {scenario} surface {s} replicate {r}: {e}", fitter.name());
                    }
                    CellResult {
                        surface_id: s,
                        replicate: r,
                        method: fitter.name(),
                        scenario,
                        r2: outcome.as_ref().ok().copied(),
                        error: outcome.err(),
                    }
                })
                .collect()
        })
        .collect();
    let cells: Vec<CellResult> = cells.into_iter().flatten().collect();

    let mut summary = Vec::new();
    for &scenario in &config.scenarios {
        for fitter in fitters {
            let name = fitter.name();
            let mine: Vec<&CellResult> = cells
                .iter()
                .filter(|c| c.scenario == scenario && c.method == name)
                .collect();
            let ok: Vec<f64> = mine.iter().filter_map(|c| c.r2).collect();
            summary.push(SummaryRow {
                mean_r2: if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().sum::<f64>() / ok.len() as f64
                },
                n_failed: mine.len() - ok.len(),
                n_ok: ok.len(),
                method: name,
                scenario,
            });
        }
    }
    Ok(ExperimentResult { cells, summary })
}
