use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpatialError};

/// Knot locations for a radial basis, one row per knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotSet {
    pub knots: DMatrix<f64>,
    pub selection_seed: u64,
}

impl KnotSet {
    pub fn len(&self) -> usize {
        self.knots.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.knots.ncols()
    }
}

pub(crate) fn squared_distance(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols())
        .map(|c| {
            let d = a[(i, c)] - b[(j, c)];
            d * d
        })
        .sum()
}

/// Indices of the first occurrence of every distinct row, in input order.
pub(crate) fn distinct_rows(locations: &DMatrix<f64>) -> Vec<usize> {
    let n = locations.nrows();
    let d = locations.ncols();
    let mut order: Vec<usize> = (0..n).collect();
    let keys: Vec<Vec<u64>> = (0..n)
        .map(|i| (0..d).map(|c| locations[(i, c)].to_bits()).collect())
        .collect();
    order.sort_by(|&a, &b| keys[a].cmp(&keys[b]).then(a.cmp(&b)));
    let mut firsts = Vec::with_capacity(n);
    let mut prev: Option<&Vec<u64>> = None;
    for i in order {
        if prev != Some(&keys[i]) {
            firsts.push(i);
            prev = Some(&keys[i]);
        }
    }
    firsts.sort_unstable();
    firsts
}

/// Farthest-point sampling of `k` knots among the distinct locations.
///
/// The first knot is the location nearest the centroid; each further knot
/// maximises its minimum distance to the knots already chosen. Ties go to the
/// lowest input index, so the result does not depend on `seed`, which is only
/// recorded.
pub fn select_knots(locations: &DMatrix<f64>, k: usize, seed: u64) -> Result<KnotSet> {
    if k == 0 {
        return Err(SpatialError::param("number of knots must be at least 1"));
    }
    if locations.iter().any(|v| !v.is_finite()) {
        return Err(SpatialError::NonFinite("location coordinates".into()));
    }
    let candidates = distinct_rows(locations);
    if candidates.len() < k {
        return Err(SpatialError::InsufficientLocations {
            needed: k,
            found: candidates.len(),
        });
    }
    let d = locations.ncols();
    let mut centroid = DMatrix::zeros(1, d);
    for &i in &candidates {
        for c in 0..d {
            centroid[(0, c)] += locations[(i, c)];
        }
    }
    centroid /= candidates.len() as f64;

    let mut first = 0;
    let mut best = f64::INFINITY;
    for (pos, &i) in candidates.iter().enumerate() {
        let dist = squared_distance(locations, i, &centroid, 0);
        if dist < best {
            best = dist;
            first = pos;
        }
    }

    let mut chosen = vec![candidates[first]];
    let mut min_dist: Vec<f64> = candidates
        .iter()
        .map(|&i| squared_distance(locations, i, locations, candidates[first]))
        .collect();
    while chosen.len() < k {
        let mut pick = 0;
        let mut far = -1.0;
        for (pos, &dist) in min_dist.iter().enumerate() {
            if dist > far {
                far = dist;
                pick = pos;
            }
        }
        let knot = candidates[pick];
        chosen.push(knot);
        for (pos, &i) in candidates.iter().enumerate() {
            let dist = squared_distance(locations, i, locations, knot);
            if dist < min_dist[pos] {
                min_dist[pos] = dist;
            }
        }
    }

    let knots = DMatrix::from_fn(k, d, |r, c| locations[(chosen[r], c)]);
    Ok(KnotSet {
        knots,
        selection_seed: seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    #[test]
    fn single_distinct_location() {
        let locs = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let ks = select_knots(&locs, 1, 0).unwrap();
        assert_eq!(ks.knots, DMatrix::from_row_slice(1, 2, &[1.0, 2.0]));
        assert!(matches!(
            select_knots(&locs, 2, 0),
            Err(SpatialError::InsufficientLocations { needed: 2, found: 1 })
        ));
    }

    /// Brute force: for every ordered pair of distinct corners, check the
    /// centroid and max-min rules and collect the admissible answers.
    #[test]
    fn unit_square_corners() {
        let corners: [[f64; 2]; 4] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let locs = DMatrix::from_fn(4, 2, |r, c| corners[r][c]);
        let dist = |a: usize, b: usize| {
            ((corners[a][0] - corners[b][0]).powi(2) + (corners[a][1] - corners[b][1]).powi(2)).sqrt()
        };
        let centre_dist = |a: usize| ((corners[a][0] - 0.5).powi(2) + (corners[a][1] - 0.5).powi(2)).sqrt();
        let min_centre = (0..4).map(centre_dist).fold(f64::INFINITY, f64::min);
        let mut expected = None;
        'outer: for a in 0..4 {
            if centre_dist(a) > min_centre {
                continue;
            }
            let far = (0..4).map(|b| dist(a, b)).fold(0.0, f64::max);
            for b in 0..4 {
                if dist(a, b) == far {
                    expected = Some((a, b));
                    break 'outer;
                }
            }
        }
        let (a, b) = expected.unwrap();
        assert_eq!((a, b), (0, 3));
        let ks = select_knots(&locs, 2, 11).unwrap();
        assert_eq!(ks.knots.row(0), locs.row(a));
        assert_eq!(ks.knots.row(1), locs.row(b));
    }

    #[test]
    fn deterministic_for_seed() {
        let mut rng = rng_from_seed(3);
        let locs = DMatrix::from_fn(100, 2, |_, _| rng.random::<f64>());
        let a = select_knots(&locs, 10, 42).unwrap();
        let b = select_knots(&locs, 10, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        for i in 0..10 {
            for j in 0..i {
                assert!(squared_distance(&a.knots, i, &a.knots, j) > 0.0);
            }
        }
    }

    #[test]
    fn rejects_zero_knots() {
        let locs = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        assert!(select_knots(&locs, 0, 0).is_err());
    }
}
