//! Property-based invariants.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use spatrf::baselines::{fit_two_step, SmootherParams, SpatialModel, TwoStepOrder};
use spatrf::cv::partition_folds;
use spatrf::forest::ForestParams;
use spatrf::geometry::{exponential_covariance, LowRankCorrelation};
use spatrf::gls::{brute_force_gls_loss, CharacteristicMatrix, DensePrecision, GainAccumulator, DEFAULT_DTOL};
use spatrf::io::{read_csv, write_csv, CsvLayout};
use spatrf::LocatedDataset;

/// Coordinates, a response and a membership mask drawn together.
fn gls_problem() -> impl Strategy<Value = (Vec<(f64, f64)>, Vec<f64>, Vec<bool>)> {
    (4usize..30).prop_flat_map(|n| {
        (
            prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), n),
            prop::collection::vec(-3.0..3.0f64, n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

fn characteristic(coords: &[(f64, f64)], y: &[f64]) -> (CharacteristicMatrix, DensePrecision, DVector<f64>) {
    let n = coords.len();
    let locs = DMatrix::from_fn(n, 2, |i, c| if c == 0 { coords[i].0 } else { coords[i].1 });
    let cov = exponential_covariance(&locs, 1.0, 0.3, 0.2).unwrap();
    let precision = DensePrecision::from_covariance(&cov.matrix).unwrap();
    let y = DVector::from_column_slice(y);
    let cm = CharacteristicMatrix::new(&precision, &y, DEFAULT_DTOL).unwrap();
    (cm, precision, y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn folds_partition_and_balance(n in 2usize..300, k in 2usize..12, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let folds = partition_folds(n, k, seed);
        prop_assert_eq!(folds.len(), k);
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(partition_folds(n, k, seed), folds);
    }

    #[test]
    fn gains_are_bounded_and_order_free((coords, y, mask) in gls_problem()) {
        let (cm, _, y) = characteristic(&coords, &y);
        let members: Vec<usize> = (0..y.len()).filter(|&i| mask[i]).collect();
        prop_assume!(!members.is_empty() && members.len() < y.len());
        let gain = cm.gain(&members);
        let loss = y.dot(&(cm.omega() * &y));
        prop_assert!(gain >= 0.0);
        prop_assert!(gain <= loss * (1.0 + 1e-10) + 1e-12);
        let mut reversed = members.clone();
        reversed.reverse();
        let again = cm.gain(&reversed);
        prop_assert!((gain - again).abs() <= 1e-9 * gain.max(1.0));
    }

    #[test]
    fn prefix_sweep_matches_direct_gains((coords, y, mask) in gls_problem()) {
        let (cm, _, _) = characteristic(&coords, &y);
        let order: Vec<usize> = (0..coords.len()).filter(|&i| mask[i]).chain((0..coords.len()).filter(|&i| !mask[i])).collect();
        let mut acc = GainAccumulator::default();
        for len in 1..order.len() {
            acc.push(&cm, order[len - 1]);
            let direct = cm.gain(&order[..len]);
            let incremental = acc.gain(cm.dtol());
            prop_assert!((direct - incremental).abs() <= 1e-9 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn update_matches_refit((coords, y, mask) in gls_problem()) {
        let (mut cm, precision, y) = characteristic(&coords, &y);
        let n = y.len();
        let members: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        prop_assume!(!members.is_empty() && members.len() < n);
        let gain = cm.gain(&members);
        cm.update(&members).unwrap();
        let mut c = DMatrix::from_element(n, 2, 0.0);
        c.column_mut(0).fill(1.0);
        for &m in &members {
            c[(m, 1)] = 1.0;
        }
        let root = DMatrix::from_element(n, 1, 1.0);
        let (before, _) = brute_force_gls_loss(&y, &root, &precision).unwrap();
        let (after, _) = brute_force_gls_loss(&y, &c, &precision).unwrap();
        prop_assert!((before - after - gain).abs() <= 1e-8 * gain.max(1.0));
        prop_assert!((y.dot(&(cm.omega() * &y)) - after).abs() <= 1e-8 * after.max(1.0));
    }

    #[test]
    fn low_rank_inverse_undoes_correlation(
        n in 2usize..25,
        k in 1usize..6,
        delta in 0.0..0.99f64,
        seed in any::<u64>(),
    ) {
        let mut state = seed;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let s = DMatrix::from_fn(n, k, |_, _| next());
        let x = DMatrix::from_fn(n, 2, |_, _| next());
        let lr = LowRankCorrelation::new(s, delta).unwrap();
        let back = lr.inverse_apply(&(lr.dense() * &x));
        prop_assert!((back - x).amax() < 1e-9);
    }

    #[test]
    fn csv_round_trip_is_exact(
        rows in prop::collection::vec((any::<f64>(), any::<f64>(), any::<f64>(), any::<f64>()), 1..20),
    ) {
        prop_assume!(rows.iter().all(|r| r.0.is_finite() && r.1.is_finite() && r.2.is_finite() && r.3.is_finite()));
        let n = rows.len();
        let coords = DMatrix::from_fn(n, 2, |i, c| if c == 0 { rows[i].0 } else { rows[i].1 });
        let x = DMatrix::from_fn(n, 1, |i, _| rows[i].2);
        let z = DVector::from_fn(n, |i, _| rows[i].3);
        let ds = LocatedDataset::new(coords, x, Some(z)).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &CsvLayout::new(&["s0", "s1"], Some("z"))).unwrap();
        let bits = |m: &[f64]| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(back.coords.as_slice()), bits(ds.coords.as_slice()));
        prop_assert_eq!(bits(back.x.as_slice()), bits(ds.x.as_slice()));
        prop_assert_eq!(bits(back.z.unwrap().as_slice()), bits(ds.z.unwrap().as_slice()));
        prop_assert_eq!(back.covariate_names, vec!["x0".to_string()]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn two_step_prediction_is_the_sum_of_its_parts(seed in any::<u64>(), rf_first in any::<bool>()) {
        let mut state = seed;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let n = 40;
        let coords = DMatrix::from_fn(n, 2, |_, _| next());
        let x = DMatrix::from_fn(n, 2, |_, _| next());
        let z = DVector::from_fn(n, |i, _| x[(i, 0)] + coords[(i, 1)] + 0.1 * next());
        let data = LocatedDataset::new(coords, x, Some(z)).unwrap();
        let rf = ForestParams { n_trees: 10, seed, ..ForestParams::for_covariates(2) };
        let smoother = SmootherParams { seed, ..SmootherParams::default() };
        let order = if rf_first { TwoStepOrder::RfFirst } else { TwoStepOrder::SmootherFirst };
        let model = fit_two_step(&data, order, &rf, &smoother).unwrap();
        let (forest_part, smooth_part) = model.predict_parts(&data.x, &data.coords).unwrap();
        let total = model.predict(&data.x, &data.coords).unwrap();
        for i in 0..n {
            prop_assert_eq!(total[i], forest_part[i] + smooth_part[i]);
        }
    }
}
