//! Spatially adjusted regression trees.
//!
//! Trees are grown best-first: every round samples `mtry` covariates, scores
//! every admissible cut in every terminal node under the current
//! characteristic matrix, accepts the single best cut and downdates `Omega`.
//! With `delta = 0` the precision is the identity and the procedure reduces to
//! ordinary least-squares CART.

use std::cmp::Ordering;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LocatedDataset;
use crate::error::{Result, SpatialError};
use crate::geometry::{BasisConfig, LowRankCorrelation, SpatialBasis};
use crate::gls::{brute_force_gls_loss, CharacteristicMatrix, GainAccumulator, IdentityPrecision, PrecisionOperator, DEFAULT_DTOL};
use crate::rng::SpatialRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    /// Covariates sampled per split round.
    pub mtry: usize,
    /// Smallest admissible terminal node.
    pub min_node_size: usize,
    pub max_splits: usize,
    /// Denominator tolerance relative to `trace(Omega^0) / n`.
    pub dtol: f64,
    pub basis: BasisConfig,
}

impl TreeParams {
    /// `mtry = max(1, p / 3)`, `min_node_size = 5`, effectively unlimited splits.
    pub fn for_covariates(p: usize) -> Self {
        TreeParams {
            mtry: (p / 3).max(1),
            min_node_size: 5,
            max_splits: usize::MAX,
            dtol: DEFAULT_DTOL,
            basis: BasisConfig::default(),
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.mtry < 1 || self.mtry > p {
            return Err(SpatialError::param(format!("mtry must be in 1..={p}, got {}", self.mtry)));
        }
        if self.min_node_size < 1 {
            return Err(SpatialError::param("min_node_size must be at least 1"));
        }
        if !(self.dtol >= 0.0) {
            return Err(SpatialError::param("dtol must be nonnegative"));
        }
        Ok(())
    }
}

/// One accepted split: observations of `node_id` with covariate `covariate`
/// at or below `cutpoint` form the new terminal node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub node_id: usize,
    pub covariate: usize,
    pub cutpoint: f64,
    /// Bag positions in the new (low-side) node, ascending.
    pub member_indices: Vec<usize>,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        covariate: usize,
        cutpoint: f64,
        low: usize,
        high: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialTree {
    pub splits: Vec<SplitRecord>,
    pub nodes: Vec<TreeNode>,
    /// GLS weights: intercept followed by one entry per split.
    pub leaf_weights: Vec<f64>,
    pub eta_hat: Vec<f64>,
    pub basis: Option<SpatialBasis>,
    pub delta: f64,
    pub in_bag_indices: Vec<usize>,
    pub n_covariates: usize,
}

/// Where the spatial basis of a tree comes from.
#[derive(Debug, Clone, Copy)]
pub enum TreeBasis<'a> {
    /// Knots re-selected among the distinct in-bag locations.
    PerBag,
    /// A basis shared by all trees, with its rows at every data location.
    Shared {
        basis: &'a SpatialBasis,
        rows: &'a DMatrix<f64>,
    },
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    gain: f64,
    covariate: usize,
    cutpoint: f64,
    node: usize,
}

impl Candidate {
    /// Higher gain wins; ties go to the lowest covariate, then cutpoint, then node.
    fn beats(&self, other: &Candidate) -> bool {
        match self.gain.partial_cmp(&other.gain) {
            Some(Ordering::Greater) => true,
            Some(Ordering::Less) => false,
            _ => (self.covariate, self.cutpoint, self.node)
                .partial_cmp(&(other.covariate, other.cutpoint, other.node))
                == Some(Ordering::Less),
        }
    }
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m < b {
        m
    } else {
        a
    }
}

/// Ridge / BLUP solution `(S'S + lambda I)^{-1} S' r` with `lambda = (1 - delta) / delta`.
pub fn tree_blup(residuals: &DVector<f64>, basis_rows: &DMatrix<f64>, delta: f64) -> DVector<f64> {
    let k = basis_rows.ncols();
    if delta <= 0.0 || k == 0 {
        return DVector::zeros(k);
    }
    ridge_solve(basis_rows, residuals, (1.0 - delta) / delta)
}

pub(crate) fn ridge_solve(s: &DMatrix<f64>, r: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let k = s.ncols();
    let mut gram = s.tr_mul(s);
    for i in 0..k {
        gram[(i, i)] += lambda;
    }
    let rhs = s.tr_mul(r);
    match Cholesky::new(gram.clone()) {
        Some(chol) => chol.solve(&rhs),
        None => gram.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(k)),
    }
}

struct Grower<'a> {
    nb: usize,
    p: usize,
    /// Column-major copy of the in-bag covariates.
    xb: Vec<f64>,
    sorted: Vec<Vec<usize>>,
    cm: CharacteristicMatrix,
    params: &'a TreeParams,
    node_of: Vec<usize>,
    sizes: Vec<usize>,
    nodes: Vec<TreeNode>,
    buckets: Vec<Vec<usize>>,
    acc: GainAccumulator,
}

impl Grower<'_> {
    #[inline]
    fn value(&self, j: usize, pos: usize) -> f64 {
        self.xb[j * self.nb + pos]
    }

    fn splittable(&self) -> bool {
        let m = self.params.min_node_size;
        self.nodes
            .iter()
            .enumerate()
            .any(|(id, node)| matches!(node, TreeNode::Leaf { .. }) && self.sizes[id] >= 2 * m)
    }

    fn scan(&mut self, covariates: &[usize], best: &mut Option<Candidate>) {
        let m = self.params.min_node_size;
        let dtol = self.cm.dtol();
        for &j in covariates {
            for b in self.buckets.iter_mut() {
                b.clear();
            }
            for &pos in &self.sorted[j] {
                let node = self.node_of[pos];
                if self.sizes[node] >= 2 * m {
                    self.buckets[node].push(pos);
                }
            }
            for node in 0..self.buckets.len() {
                let size = self.buckets[node].len();
                if size < 2 * m {
                    continue;
                }
                let bucket = std::mem::take(&mut self.buckets[node]);
                self.acc.clear();
                for idx in 0..size - m {
                    let pos = bucket[idx];
                    self.acc.push(&self.cm, pos);
                    let left = idx + 1;
                    if left < m {
                        continue;
                    }
                    let here = self.value(j, pos);
                    let next = self.value(j, bucket[idx + 1]);
                    if here >= next {
                        continue;
                    }
                    let cand = Candidate {
                        gain: self.acc.gain(dtol),
                        covariate: j,
                        cutpoint: midpoint(here, next),
                        node,
                    };
                    if cand.gain.is_finite() && best.as_ref().is_none_or(|b| cand.beats(b)) {
                        *best = Some(cand);
                    }
                }
                self.buckets[node] = bucket;
            }
        }
    }

    fn apply(&mut self, cand: Candidate) -> Result<SplitRecord> {
        let members: Vec<usize> = (0..self.nb)
            .filter(|&pos| self.node_of[pos] == cand.node && self.value(cand.covariate, pos) <= cand.cutpoint)
            .collect();
        self.cm.update(&members)?;
        let low = self.nodes.len();
        let high = low + 1;
        self.nodes.push(TreeNode::Leaf { value: 0.0 });
        self.nodes.push(TreeNode::Leaf { value: 0.0 });
        self.buckets.push(Vec::new());
        self.buckets.push(Vec::new());
        self.nodes[cand.node] = TreeNode::Split {
            covariate: cand.covariate,
            cutpoint: cand.cutpoint,
            low,
            high,
        };
        let parent_size = self.sizes[cand.node];
        self.sizes.push(members.len());
        self.sizes.push(parent_size - members.len());
        for pos in 0..self.nb {
            if self.node_of[pos] == cand.node {
                self.node_of[pos] = if self.value(cand.covariate, pos) <= cand.cutpoint { low } else { high };
            }
        }
        Ok(SplitRecord {
            node_id: cand.node,
            covariate: cand.covariate,
            cutpoint: cand.cutpoint,
            member_indices: members,
            gain: cand.gain,
        })
    }
}

/// Grows one tree on the bag `bag` (row indices into `data`, repeats allowed)
/// with knots re-selected among the in-bag locations.
pub fn fit_tree(
    data: &LocatedDataset,
    bag: &[usize],
    delta: f64,
    params: &TreeParams,
    rng: &mut SpatialRng,
) -> Result<SpatialTree> {
    fit_tree_with_basis(data, bag, delta, params, TreeBasis::PerBag, rng)
}

pub fn fit_tree_with_basis(
    data: &LocatedDataset,
    bag: &[usize],
    delta: f64,
    params: &TreeParams,
    basis_source: TreeBasis<'_>,
    rng: &mut SpatialRng,
) -> Result<SpatialTree> {
    fit_tree_observed(data, bag, delta, params, basis_source, rng, &mut |_, _| {})
}

/// Tree growth with a hook that sees the characteristic matrix and the
/// splits accepted so far, once after the root initialisation and again
/// after every accepted split.
pub fn fit_tree_observed(
    data: &LocatedDataset,
    bag: &[usize],
    delta: f64,
    params: &TreeParams,
    basis_source: TreeBasis<'_>,
    rng: &mut SpatialRng,
    observe: &mut dyn FnMut(&CharacteristicMatrix, &[SplitRecord]),
) -> Result<SpatialTree> {
    if bag.is_empty() {
        return Err(SpatialError::param("bag must be nonempty"));
    }
    if !(0.0..1.0).contains(&delta) {
        return Err(SpatialError::param(format!("delta must lie in [0, 1), got {delta}")));
    }
    let p = data.p();
    params.validate(p)?;
    let z = data.response()?;
    let nb = bag.len();
    let y_b = DVector::from_fn(nb, |i, _| z[bag[i]]);

    let basis_seed: u64 = rng.random();
    let (basis, s_b) = if delta > 0.0 {
        match basis_source {
            TreeBasis::PerBag => {
                let coords = data.coords.select_rows(bag);
                let (basis, s) = SpatialBasis::fit(&coords, &params.basis, basis_seed)?;
                (Some(basis), s)
            }
            TreeBasis::Shared { basis, rows } => (Some(basis.clone()), rows.select_rows(bag)),
        }
    } else {
        (None, DMatrix::zeros(nb, 0))
    };

    let precision: Box<dyn PrecisionOperator> = if delta > 0.0 {
        Box::new(LowRankCorrelation::new(s_b.clone(), delta)?)
    } else {
        Box::new(IdentityPrecision(nb))
    };
    let cm = CharacteristicMatrix::new(precision.as_ref(), &y_b, params.dtol)?;
    observe(&cm, &[]);

    let mut xb = Vec::with_capacity(nb * p);
    for j in 0..p {
        xb.extend(bag.iter().map(|&i| data.x[(i, j)]));
    }
    let sorted: Vec<Vec<usize>> = (0..p)
        .map(|j| {
            let col = &xb[j * nb..(j + 1) * nb];
            let mut order: Vec<usize> = (0..nb).collect();
            order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
            order
        })
        .collect();

    let mut grower = Grower {
        nb,
        p,
        xb,
        sorted,
        cm,
        params,
        node_of: vec![0; nb],
        sizes: vec![nb],
        nodes: vec![TreeNode::Leaf { value: 0.0 }],
        buckets: vec![Vec::new()],
        acc: GainAccumulator::default(),
    };

    let mut splits = Vec::new();
    while splits.len() < params.max_splits && grower.splittable() {
        let mut chosen: Vec<usize> = sample(rng, p, params.mtry).into_vec();
        chosen.sort_unstable();
        let mut best = None;
        grower.scan(&chosen, &mut best);
        if best.is_none() && params.mtry < grower.p {
            // No admissible cut among the sampled covariates: fall back to the rest.
            let rest: Vec<usize> = (0..grower.p).filter(|j| chosen.binary_search(j).is_err()).collect();
            grower.scan(&rest, &mut best);
        }
        let Some(cand) = best else { break };
        splits.push(grower.apply(cand)?);
        observe(&grower.cm, &splits);
    }

    // GLS weights on the final design: intercept plus one column per split.
    let mut c = DMatrix::zeros(nb, splits.len() + 1);
    c.column_mut(0).fill(1.0);
    for (t, split) in splits.iter().enumerate() {
        for &pos in &split.member_indices {
            c[(pos, t + 1)] = 1.0;
        }
    }
    let (_, pi) = brute_force_gls_loss(&y_b, &c, precision.as_ref())?;
    let residuals = &y_b - &c * &pi;
    let eta_hat = tree_blup(&residuals, &s_b, delta);

    let mut nodes = grower.nodes;
    assign_leaf_values(&mut nodes, &splits, pi.as_slice());

    Ok(SpatialTree {
        splits,
        nodes,
        leaf_weights: pi.as_slice().to_vec(),
        eta_hat: eta_hat.as_slice().to_vec(),
        basis,
        delta,
        in_bag_indices: bag.to_vec(),
        n_covariates: p,
    })
}

/// Each leaf's value is the intercept plus the weights of every split whose
/// new node contains it.
fn assign_leaf_values(nodes: &mut [TreeNode], splits: &[SplitRecord], pi: &[f64]) {
    let column_of_low: std::collections::HashMap<usize, usize> = splits
        .iter()
        .enumerate()
        .filter_map(|(t, s)| match nodes[s.node_id] {
            TreeNode::Split { low, .. } => Some((low, t + 1)),
            TreeNode::Leaf { .. } => None,
        })
        .collect();
    let mut stack = vec![(0usize, pi[0])];
    while let Some((id, acc)) = stack.pop() {
        match nodes[id] {
            TreeNode::Leaf { .. } => nodes[id] = TreeNode::Leaf { value: acc },
            TreeNode::Split { low, high, .. } => {
                stack.push((low, acc + pi[column_of_low[&low]]));
                stack.push((high, acc));
            }
        }
    }
}

impl SpatialTree {
    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }

    /// Terminal node reached by row `i` of `x`.
    pub fn leaf_of(&self, x: &DMatrix<f64>, i: usize) -> usize {
        let mut id = 0;
        loop {
            match self.nodes[id] {
                TreeNode::Leaf { .. } => return id,
                TreeNode::Split {
                    covariate,
                    cutpoint,
                    low,
                    high,
                } => id = if x[(i, covariate)] <= cutpoint { low } else { high },
            }
        }
    }

    /// Tree part of the prediction only.
    pub fn predict_mean(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_covariates {
            return Err(SpatialError::Dimension(format!(
                "expected {} covariate columns, got {}",
                self.n_covariates,
                x.ncols()
            )));
        }
        Ok((0..x.nrows())
            .map(|i| match self.nodes[self.leaf_of(x, i)] {
                TreeNode::Leaf { value } => value,
                TreeNode::Split { .. } => unreachable!(),
            })
            .collect())
    }

    /// `S(s) eta_hat` at the given locations; zero without a basis.
    pub fn spatial_effect(&self, coords: &DMatrix<f64>) -> Result<Vec<f64>> {
        match &self.basis {
            Some(basis) if !self.eta_hat.is_empty() => {
                let rows = basis.evaluate(coords)?;
                let eta = DVector::from_column_slice(&self.eta_hat);
                Ok((rows * eta).as_slice().to_vec())
            }
            _ => Ok(vec![0.0; coords.nrows()]),
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>, coords: &DMatrix<f64>, include_spatial: bool) -> Result<Vec<f64>> {
        let mut out = self.predict_mean(x)?;
        if include_spatial {
            if coords.nrows() != x.nrows() {
                return Err(SpatialError::Dimension("coordinate and covariate row counts differ".into()));
            }
            for (o, s) in out.iter_mut().zip(self.spatial_effect(coords)?) {
                *o += s;
            }
        }
        Ok(out)
    }
}

/// Free-function form of [`SpatialTree::predict`].
pub fn predict_tree(
    tree: &SpatialTree,
    x_new: &DMatrix<f64>,
    locations_new: &DMatrix<f64>,
    include_spatial: bool,
) -> Result<Vec<f64>> {
    tree.predict(x_new, locations_new, include_spatial)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand_distr::StandardNormal;

    fn dataset(n: usize, p: usize, seed: u64) -> LocatedDataset {
        let mut rng = rng_from_seed(seed);
        let coords = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let x = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>());
        let z = DVector::from_fn(n, |i, _| {
            (3.0 * x[(i, 0)]).sin() + coords[(i, 0)] + 0.1 * rng.sample::<f64, _>(StandardNormal)
        });
        LocatedDataset::new(coords, x, Some(z)).unwrap()
    }

    fn full_bag(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn root_only_tree_is_gls_mean() {
        let ds = dataset(30, 3, 1);
        let mut params = TreeParams::for_covariates(3);
        params.max_splits = 0;
        let z = ds.response().unwrap();
        let tree = fit_tree(&ds, &full_bag(30), 0.0, &params, &mut rng_from_seed(0)).unwrap();
        let mean = z.mean();
        for v in tree.predict(&ds.x, &ds.coords, true).unwrap() {
            assert!((v - mean).abs() < 1e-12);
        }
        let tree = fit_tree(&ds, &full_bag(30), 0.6, &params, &mut rng_from_seed(0)).unwrap();
        let lr = LowRankCorrelation::new(
            tree.basis.as_ref().unwrap().evaluate(&ds.coords).unwrap(),
            0.6,
        )
        .unwrap();
        let ones = DMatrix::from_element(30, 1, 1.0);
        let (_, pi) = brute_force_gls_loss(z, &ones, &lr).unwrap();
        let means = tree.predict_mean(&ds.x).unwrap();
        assert!((means[0] - pi[0]).abs() < 1e-10);
    }

    #[test]
    fn binary_covariate_separates_clusters() {
        let n = 20;
        let coords = DMatrix::from_fn(n, 2, |i, c| (i * (c + 1)) as f64 * 0.1);
        let x = DMatrix::from_fn(n, 2, |i, c| if c == 0 { (i % 2) as f64 } else { ((i * 7) % 5) as f64 });
        let z = DVector::from_fn(n, |i, _| if i % 2 == 0 { 0.1 * (i % 3) as f64 } else { 10.0 + 0.1 * (i % 4) as f64 });
        let ds = LocatedDataset::new(coords, x, Some(z.clone())).unwrap();
        let mut params = TreeParams::for_covariates(2);
        params.mtry = 2;
        params.max_splits = 1;
        params.min_node_size = 1;
        let tree = fit_tree(&ds, &full_bag(n), 0.0, &params, &mut rng_from_seed(0)).unwrap();
        assert_eq!(tree.splits[0].covariate, 0);
        let preds = tree.predict_mean(&ds.x).unwrap();
        let mean_of = |parity: usize| {
            let v: Vec<f64> = (0..n).filter(|i| i % 2 == parity).map(|i| z[i]).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        for i in 0..n {
            assert!((preds[i] - mean_of(i % 2)).abs() < 1e-10);
        }
    }

    #[test]
    fn in_bag_predictions_are_gls_fit() {
        let ds = dataset(40, 4, 2);
        let params = TreeParams::for_covariates(4);
        let bag: Vec<usize> = (0..40).map(|i| (i * 7) % 40).collect();
        for delta in [0.0, 0.4] {
            let tree = fit_tree(&ds, &bag, delta, &params, &mut rng_from_seed(3)).unwrap();
            let mut c = DMatrix::zeros(40, tree.splits.len() + 1);
            c.column_mut(0).fill(1.0);
            for (t, s) in tree.splits.iter().enumerate() {
                for &pos in &s.member_indices {
                    c[(pos, t + 1)] = 1.0;
                }
            }
            let fitted = &c * DVector::from_column_slice(&tree.leaf_weights);
            let xb = ds.x.select_rows(&bag);
            let preds = tree.predict_mean(&xb).unwrap();
            for i in 0..40 {
                assert!((preds[i] - fitted[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn spatial_term_difference() {
        let ds = dataset(40, 3, 4);
        let params = TreeParams::for_covariates(3);
        let tree = fit_tree(&ds, &full_bag(40), 0.5, &params, &mut rng_from_seed(1)).unwrap();
        let with = tree.predict(&ds.x, &ds.coords, true).unwrap();
        let without = tree.predict(&ds.x, &ds.coords, false).unwrap();
        let rows = tree.basis.as_ref().unwrap().evaluate(&ds.coords).unwrap();
        let effect = rows * DVector::from_column_slice(&tree.eta_hat);
        for i in 0..40 {
            assert_eq!(with[i], without[i] + effect[i]);
        }
        assert!(effect.amax() > 0.0);
    }

    #[test]
    fn node_size_contract_and_determinism() {
        let ds = dataset(60, 5, 5);
        let mut params = TreeParams::for_covariates(5);
        params.min_node_size = 4;
        let bag: Vec<usize> = (0..60).map(|i| (i * 13 + 5) % 60).collect();
        let a = fit_tree(&ds, &bag, 0.3, &params, &mut rng_from_seed(9)).unwrap();
        let b = fit_tree(&ds, &bag, 0.3, &params, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a, b);
        let xb = ds.x.select_rows(&bag);
        let mut counts = std::collections::HashMap::new();
        for i in 0..60 {
            *counts.entry(a.leaf_of(&xb, i)).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), a.n_leaves());
        assert!(counts.values().all(|&c| c >= 4));
    }

    #[test]
    fn blup_limits_and_gradient() {
        let mut rng = rng_from_seed(6);
        let s = DMatrix::from_fn(12, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let r = DVector::from_fn(12, |_, _| rng.sample::<f64, _>(StandardNormal));
        assert_eq!(tree_blup(&r, &s, 0.0), DVector::zeros(3));
        assert_eq!(tree_blup(&DVector::zeros(12), &s, 0.5), DVector::zeros(3));
        let eta = tree_blup(&r, &s, 0.5);
        // Gradient of |r - S eta|^2 + |eta|^2 vanishes at the solution.
        let grad = -2.0 * s.transpose() * (&r - &s * &eta) + 2.0 * &eta;
        assert!(grad.amax() < 1e-10);
        // and a finite-difference check that it is a minimum
        let obj = |e: &DVector<f64>| (&r - &s * e).norm_squared() + e.norm_squared();
        for j in 0..3 {
            let mut e = eta.clone();
            e[j] += 1e-4;
            assert!(obj(&e) > obj(&eta));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let ds = dataset(10, 2, 7);
        let params = TreeParams::for_covariates(2);
        assert!(fit_tree(&ds, &[], 0.0, &params, &mut rng_from_seed(0)).is_err());
        assert!(fit_tree(&ds, &full_bag(10), 1.0, &params, &mut rng_from_seed(0)).is_err());
        let tree = fit_tree(&ds, &full_bag(10), 0.0, &params, &mut rng_from_seed(0)).unwrap();
        assert!(tree.predict_mean(&DMatrix::zeros(2, 3)).is_err());
    }
}
