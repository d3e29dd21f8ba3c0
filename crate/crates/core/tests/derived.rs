//! Quantities recomputed by independent routes: closed forms, dense algebra
//! or manual aggregation over the fitted trees.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use spatrf::baselines::{fit_smoother, SmootherParams};
use spatrf::data::r_squared;
use spatrf::forest::{evaluate_pseudo_likelihood, fit_fixed_delta, fit_sprf_np, ForestParams};
use spatrf::geometry::{BasisConfig, LowRankCorrelation, SpatialBasis};
use spatrf::rng::{rng_from_seed, SpatialRng};
use spatrf::simulation::{generate_surface, unit_square_grid, synthetic_covariates, Generator, Scenario, SurfaceSpec};
use spatrf::tree::tree_blup;
use spatrf::LocatedDataset;

fn normal(rng: &mut SpatialRng) -> f64 {
    rng.sample(StandardNormal)
}

fn dataset(seed: u64, n: usize) -> LocatedDataset {
    let mut rng = rng_from_seed(seed);
    let coords = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
    let x = DMatrix::from_fn(n, 3, |_, _| normal(&mut rng));
    let z = DVector::from_fn(n, |i, _| x[(i, 0)] + (5.0 * coords[(i, 1)]).cos() + 0.3 * normal(&mut rng));
    LocatedDataset::new(coords, x, Some(z)).unwrap()
}

/// OOB average of tree predictions, built by hand from the bags.
fn manual_oob(forest: &spatrf::forest::SpatialForest, data: &LocatedDataset, include_spatial: bool) -> Vec<Option<f64>> {
    let n = data.n();
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for tree in &forest.trees {
        let preds = tree.predict(&data.x, &data.coords, include_spatial).unwrap();
        for i in 0..n {
            if !tree.in_bag_indices.contains(&i) {
                sum[i] += preds[i];
                count[i] += 1;
            }
        }
    }
    (0..n).map(|i| (count[i] > 0).then(|| sum[i] / count[i] as f64)).collect()
}

#[test]
fn pseudo_likelihood_at_zero_delta_has_closed_form() {
    let data = dataset(1, 70);
    let params = ForestParams {
        n_trees: 40,
        seed: 3,
        ..ForestParams::for_covariates(3)
    };
    let forest = fit_fixed_delta(&data, 0.0, &params).unwrap();
    let (_, rows) = SpatialBasis::fit(&data.coords, &BasisConfig::default(), 0).unwrap();
    let pl = evaluate_pseudo_likelihood(&forest, &data, &rows, 0.0).unwrap();

    let oob = manual_oob(&forest, &data, false);
    assert!(oob.iter().all(Option::is_some), "40 trees should cover every point");
    let z = data.z.as_ref().unwrap();
    let rss: f64 = oob.iter().zip(z.iter()).map(|(f, y)| (y - f.unwrap()).powi(2)).sum();
    let n = data.n() as f64;
    let expected = -(n / 2.0) * (rss / n).ln() - n / 2.0;
    assert!((pl.value - expected).abs() < 1e-10, "{} vs {expected}", pl.value);
    assert_eq!(pl.log_det, 0.0);
}

#[test]
fn pseudo_likelihood_matches_dense_gaussian_profile() {
    let data = dataset(2, 50);
    let params = ForestParams {
        n_trees: 30,
        seed: 5,
        ..ForestParams::for_covariates(3)
    };
    let delta = 0.6;
    let forest = fit_fixed_delta(&data, delta, &params).unwrap();
    let (_, rows) = SpatialBasis::fit(&data.coords, &BasisConfig::default(), 0).unwrap();
    let pl = evaluate_pseudo_likelihood(&forest, &data, &rows, delta).unwrap();

    let r = LowRankCorrelation::new(rows, delta).unwrap().dense();
    let resid = data.z.as_ref().unwrap() - &pl.fitted;
    let lu = r.clone().lu();
    let quad = resid.dot(&lu.solve(&resid).unwrap());
    let n = data.n() as f64;
    let expected = -(n / 2.0) * (quad / n).ln() - 0.5 * lu.determinant().ln() - n / 2.0;
    assert!((pl.value - expected).abs() < 1e-8 * expected.abs().max(1.0));
}

#[test]
fn np_criterion_is_the_oob_error_with_spatial_term() {
    let data = dataset(3, 60);
    let params = ForestParams {
        n_trees: 30,
        seed: 9,
        delta_grid: vec![0.0, 0.5],
        ..ForestParams::for_covariates(3)
    };
    let (_, profile) = fit_sprf_np(&data, &params).unwrap();
    let z = data.z.as_ref().unwrap();
    for (g, &delta) in params.delta_grid.iter().enumerate() {
        let forest = fit_fixed_delta(&data, delta, &params).unwrap();
        let oob = manual_oob(&forest, &data, true);
        let (sum, count) = oob
            .iter()
            .zip(z.iter())
            .filter_map(|(p, y)| p.map(|p| (y - p).powi(2)))
            .fold((0.0, 0usize), |(s, c), e| (s + e, c + 1));
        let mse = sum / count as f64;
        assert!((profile.criterion_values[g] - mse).abs() < 1e-12 * mse.max(1.0));
    }
}

#[test]
fn tree_blup_equals_kriging_form() {
    let mut rng = rng_from_seed(4);
    let (n, k) = (25, 6);
    let s = DMatrix::from_fn(n, k, |_, _| normal(&mut rng));
    let r = DVector::from_fn(n, |_, _| normal(&mut rng));
    for delta in [0.2, 0.5, 0.9] {
        let ridge = tree_blup(&r, &s, delta);
        let corr = LowRankCorrelation::new(s.clone(), delta).unwrap().dense();
        let kriging = s.transpose() * corr.lu().solve(&r).unwrap() * delta;
        assert!((ridge - kriging).amax() < 1e-10);
    }
}

#[test]
fn smoother_matches_augmented_least_squares() {
    let data = dataset(5, 80);
    let lambda = 0.7;
    let params = SmootherParams {
        lambda_grid: Some(vec![lambda]),
        seed: 2,
        ..SmootherParams::default()
    };
    let model = fit_smoother(&data, &params).unwrap();
    let s = model.basis.evaluate(&data.coords).unwrap();
    let (n, k) = (s.nrows(), s.ncols());
    // [1 S; 0 sqrt(lambda) I] [b0; beta] ~ [y; 0], solved by QR.
    let a = DMatrix::from_fn(n + k, k + 1, |i, j| match (i < n, j) {
        (true, 0) => 1.0,
        (true, j) => s[(i, j - 1)],
        (false, 0) => 0.0,
        (false, j) => {
            if i - n == j - 1 {
                lambda.sqrt()
            } else {
                0.0
            }
        }
    });
    let mut b = DVector::zeros(n + k);
    b.rows_mut(0, n).copy_from(data.z.as_ref().unwrap());
    let qr = a.qr();
    let coef = qr.r().solve_upper_triangular(&(qr.q().transpose() * b)).unwrap();
    let expected = (0..n).map(|i| coef[0] + (0..k).map(|j| s[(i, j)] * coef[j + 1]).sum::<f64>());
    let got = model.predict_at(&data.coords).unwrap();
    for (g, e) in got.iter().zip(expected) {
        assert!((g - e).abs() < 1e-8, "{g} vs {e}");
    }
}

#[test]
fn generated_surfaces_hit_their_variance_shares() {
    let locations = unit_square_grid(12);
    let covariates = synthetic_covariates(&locations, 8, 3);
    for (scenario, generator) in [
        (Scenario::Strong, Generator::SparseLinear),
        (Scenario::Weak, Generator::Interactions),
        (Scenario::Strong, Generator::DenseLinear),
    ] {
        let spec = SurfaceSpec::draw(scenario, generator, 11);
        let surface = generate_surface(&spec, &locations, &covariates).unwrap();
        let total = &surface.covariate_part + &surface.spatial_part;
        let share = surface.covariate_part.variance() / total.variance();
        assert!((share - scenario.covariate_share()).abs() <= 0.02, "{share}");
        assert!((total - &surface.truth).amax() < 1e-12);
    }
}

#[test]
fn r_squared_reference_values() {
    let y = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(r_squared(&y, &y), 1.0);
    assert!(r_squared(&y, &[2.5; 4]).abs() < 1e-15);
    // 1 - 0.5 / 5
    assert!((r_squared(&y, &[1.5, 2.0, 3.0, 3.5]) - 0.9).abs() < 1e-15);
}
