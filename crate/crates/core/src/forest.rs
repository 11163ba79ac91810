//! Honest regression forest with exportable smoother weights.
//!
//! Each tree draws a subsample without replacement and splits it into a
//! structure part that places splits and an estimation part that populates
//! leaves. Predictions are averages of estimation-part outcomes, so the
//! forest is a linear smoother: predict(x) = sum_i alpha_i(x) * y_i with
//! weights alpha_i(x) >= 0 summing to one. [`ForestModel::weights_at`]
//! exposes those weights.
//!
//! Determinism: every tree owns an RNG stream derived from (seed, tree
//! index), and all cross-tree reductions run in tree order, so fits and
//! predictions are bit-identical for a given seed regardless of thread
//! count.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ForestParams {
    pub num_trees: usize,
    /// Minimum structure-part observations per child for a split to be
    /// admissible. Leaves whose estimation part comes up empty are pruned
    /// back into their parent.
    pub min_leaf: usize,
    /// Features tried per split; 0 resolves to ceil(sqrt(p)) at fit time.
    pub mtry: usize,
    /// Fraction of the sample drawn (without replacement) per tree.
    pub subsample_fraction: f64,
    /// Share of each subsample used to place splits; the remainder
    /// populates leaves. 0.0 disables honesty: the whole subsample both
    /// places splits and populates leaves.
    pub honesty_fraction: f64,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            num_trees: 500,
            min_leaf: 5,
            mtry: 0,
            subsample_fraction: 0.5,
            honesty_fraction: 0.5,
            seed: 0,
        }
    }
}

impl ForestParams {
    /// Defaults for 0/1 propensity regressions (larger leaves).
    pub fn propensity_default() -> Self {
        ForestParams {
            min_leaf: 10,
            ..ForestParams::default()
        }
    }

    pub fn with_num_trees(mut self, b: usize) -> Self {
        self.num_trees = b;
        self
    }

    pub fn with_min_leaf(mut self, m: usize) -> Self {
        self.min_leaf = m;
        self
    }

    pub fn with_mtry(mut self, m: usize) -> Self {
        self.mtry = m;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self, n: usize, p: usize) -> Result<()> {
        if self.num_trees == 0 {
            return Err(Error::invalid_param("num_trees must be positive"));
        }
        if self.min_leaf == 0 {
            return Err(Error::invalid_param("min_leaf must be positive"));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::invalid_param(
                "subsample_fraction must lie in (0, 1]",
            ));
        }
        if !(self.honesty_fraction >= 0.0 && self.honesty_fraction < 1.0) {
            return Err(Error::invalid_param("honesty_fraction must lie in [0, 1)"));
        }
        if self.mtry > p {
            return Err(Error::invalid_param(format!(
                "mtry {} exceeds number of features {p}",
                self.mtry
            )));
        }
        if n < 2 {
            return Err(Error::invalid_data(format!(
                "need at least 2 observations to fit a forest, got {n}"
            )));
        }
        Ok(())
    }
}

/// Default out-of-bag tuning grid: mtry in {ceil(sqrt p), ceil(p/3)},
/// min_leaf in {5, 20}, deduplicated. Each candidate gets its own derived
/// seed so candidate forests are independent.
pub fn default_tuning_grid(p: usize, base: &ForestParams) -> Vec<ForestParams> {
    let mut mtries = vec![
        (p as f64).sqrt().ceil() as usize,
        (p as f64 / 3.0).ceil() as usize,
    ];
    mtries.sort_unstable();
    mtries.dedup();
    let mut leaves = vec![5usize, 20usize];
    leaves.retain(|&m| m >= 1);
    leaves.sort_unstable();
    leaves.dedup();
    let mut grid = Vec::new();
    for (gi, &mtry) in mtries.iter().enumerate() {
        for (gj, &min_leaf) in leaves.iter().enumerate() {
            grid.push(ForestParams {
                mtry: mtry.min(p).max(1),
                min_leaf,
                seed: crate::stats::mix_seed(base.seed, &[0x7u64, gi as u64, gj as u64]),
                ..base.clone()
            });
        }
    }
    grid
}

#[derive(Debug, Clone)]
enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        start: u32,
        len: u32,
        value: f64,
    },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
    /// Estimation-part indices, grouped per leaf via (start, len).
    est_items: Vec<u32>,
    /// Sorted subsample indices (structure plus estimation), for OOB tests.
    subsample: Vec<u32>,
    /// Estimation-part indices as drawn (not leaf-grouped).
    est_all: Vec<u32>,
}

impl Tree {
    fn leaf_at(&self, x_row: &dyn Fn(usize) -> f64) -> &Node {
        let mut id = 0usize;
        loop {
            match &self.nodes[id] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    id = if x_row(*feature as usize) <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
                leaf @ Node::Leaf { .. } => return leaf,
            }
        }
    }
}

/// Nonnegative smoother weights over the training sample at one prediction
/// point. `indices` is strictly increasing; weights sum to one.
#[derive(Debug, Clone)]
pub struct SmootherWeights {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl SmootherWeights {
    pub fn sum(&self) -> f64 {
        crate::stats::pairwise_sum(&self.weights)
    }

    /// Weighted sum of a vector indexed over the training sample.
    pub fn dot(&self, v: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .indices
            .iter()
            .zip(&self.weights)
            .map(|(&i, &w)| w * v[i])
            .collect();
        crate::stats::pairwise_sum(&terms)
    }
}

pub struct ForestModel {
    params: ForestParams,
    x: Array2<f64>,
    y: Array1<f64>,
    trees: Vec<Tree>,
    oob_mse: f64,
}

impl ForestModel {
    /// Fits an honest forest of `params.num_trees` trees.
    ///
    /// A constant outcome yields a valid model predicting that constant.
    pub fn fit(
        x: ArrayView2<f64>,
        y: ArrayView1<f64>,
        params: &ForestParams,
    ) -> Result<ForestModel> {
        let n = x.nrows();
        let p = x.ncols();
        if y.len() != n {
            return Err(Error::invalid_data(format!(
                "x has {n} rows but y has {} entries",
                y.len()
            )));
        }
        if p == 0 {
            return Err(Error::invalid_data("x must have at least one column"));
        }
        params.validate(n, p)?;
        for v in x.iter() {
            if !v.is_finite() {
                return Err(Error::invalid_data("non-finite value in x"));
            }
        }
        for v in y.iter() {
            if !v.is_finite() {
                return Err(Error::invalid_data("non-finite value in y"));
            }
        }

        let mut resolved = params.clone();
        if resolved.mtry == 0 {
            resolved.mtry = ((p as f64).sqrt().ceil() as usize).clamp(1, p);
        }

        let m = ((resolved.subsample_fraction * n as f64).floor() as usize).clamp(2, n);
        let n_struct = if resolved.honesty_fraction == 0.0 {
            m
        } else {
            ((resolved.honesty_fraction * m as f64).round() as usize).clamp(1, m - 1)
        };

        let x_owned = x.to_owned();
        let y_owned = y.to_owned();
        let trees: Vec<Tree> = (0..resolved.num_trees)
            .into_par_iter()
            .map(|b| build_tree(&x_owned, &y_owned, &resolved, b, m, n_struct))
            .collect();

        let oob_mse = compute_oob_mse(&x_owned, &y_owned, &trees);

        Ok(ForestModel {
            params: resolved,
            x: x_owned,
            y: y_owned,
            trees,
            oob_mse,
        })
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn num_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn n_train(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Mean squared error of out-of-bag predictions: each observation is
    /// predicted by the trees whose subsample excludes it. NaN if no
    /// observation is ever out of bag.
    pub fn oob_mse(&self) -> f64 {
        self.oob_mse
    }

    /// Estimation-part indices of one tree (leaf-grouped order).
    pub fn tree_estimation_indices(&self, tree: usize) -> &[u32] {
        &self.trees[tree].est_all
    }

    /// Sorted subsample (structure plus estimation) of one tree.
    pub fn tree_subsample(&self, tree: usize) -> &[u32] {
        &self.trees[tree].subsample
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.x.ncols() {
            return Err(Error::invalid_data(format!(
                "prediction point has {len} features, model expects {}",
                self.x.ncols()
            )));
        }
        Ok(())
    }

    pub fn predict(&self, x_row: ArrayView1<f64>) -> Result<f64> {
        self.check_dim(x_row.len())?;
        let lookup = |j: usize| x_row[j];
        let per_tree: Vec<f64> = self
            .trees
            .iter()
            .map(|t| match t.leaf_at(&lookup) {
                Node::Leaf { value, .. } => *value,
                Node::Split { .. } => unreachable!("leaf_at returns leaves"),
            })
            .collect();
        Ok(crate::stats::pairwise_sum(&per_tree) / per_tree.len() as f64)
    }

    /// Predicts each row of `x`; rows are independent, so this runs in
    /// parallel with deterministic output order.
    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check_dim(x.ncols())?;
        let rows: Vec<usize> = (0..x.nrows()).collect();
        let out: Vec<f64> = rows
            .par_iter()
            .map(|&i| self.predict(x.row(i)).expect("dimension checked"))
            .collect();
        Ok(out)
    }

    /// Smoother weights alpha(x) over the training sample. Each tree
    /// contributes 1/(B * leaf size) to every estimation index in the leaf
    /// containing x.
    pub fn weights_at(&self, x_row: ArrayView1<f64>) -> Result<SmootherWeights> {
        self.check_dim(x_row.len())?;
        let n = self.y.len();
        let b = self.trees.len() as f64;
        let mut buf = vec![0.0f64; n];
        let lookup = |j: usize| x_row[j];
        for tree in &self.trees {
            if let Node::Leaf { start, len, .. } = tree.leaf_at(&lookup) {
                let w = 1.0 / (b * *len as f64);
                for &i in &tree.est_items[*start as usize..(*start + *len) as usize] {
                    buf[i as usize] += w;
                }
            }
        }
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        for (i, &w) in buf.iter().enumerate() {
            if w > 0.0 {
                indices.push(i);
                weights.push(w);
            }
        }
        Ok(SmootherWeights { indices, weights })
    }

    /// Picks the grid entry with the lowest out-of-bag MSE; earlier entries
    /// win ties. Every candidate is fitted on the full data.
    pub fn tune(
        x: ArrayView2<f64>,
        y: ArrayView1<f64>,
        grid: &[ForestParams],
    ) -> Result<ForestParams> {
        if grid.is_empty() {
            return Err(Error::invalid_param("tuning grid is empty"));
        }
        let mut best: Option<(f64, usize)> = None;
        for (gi, candidate) in grid.iter().enumerate() {
            let model = ForestModel::fit(x, y, candidate)?;
            let mse = model.oob_mse();
            if mse.is_nan() {
                continue;
            }
            if best.map_or(true, |(b, _)| mse < b) {
                best = Some((mse, gi));
            }
        }
        match best {
            Some((_, gi)) => Ok(grid[gi].clone()),
            None => Err(Error::invalid_data(
                "no tuning candidate produced out-of-bag predictions",
            )),
        }
    }
}

fn build_tree(
    x: &Array2<f64>,
    y: &Array1<f64>,
    params: &ForestParams,
    tree_index: usize,
    m: usize,
    n_struct: usize,
) -> Tree {
    let n = x.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(1 + tree_index as u64);

    let mut sub: Vec<u32> = rand::seq::index::sample(&mut rng, n, m)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    // index::sample's order is implementation-defined; shuffle so the
    // structure/estimation cut is an unbiased random split.
    sub.shuffle(&mut rng);
    // n_struct == m means honesty is off: both roles use the full subsample.
    let structure: Vec<u32> = sub[..n_struct].to_vec();
    let estimation: Vec<u32> = if n_struct == m {
        structure.clone()
    } else {
        sub[n_struct..].to_vec()
    };

    let mut grower = Grower {
        x,
        y,
        min_leaf: params.min_leaf,
        mtry: params.mtry,
        rng,
        nodes: Vec::new(),
        est_items: Vec::new(),
        scratch: Vec::new(),
    };
    let est_all = estimation.clone();
    grower.grow(structure, estimation);

    let mut subsample = sub;
    subsample.sort_unstable();

    Tree {
        nodes: grower.nodes,
        est_items: grower.est_items,
        subsample,
        est_all,
    }
}

struct Grower<'a> {
    x: &'a Array2<f64>,
    y: &'a Array1<f64>,
    min_leaf: usize,
    mtry: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    est_items: Vec<u32>,
    scratch: Vec<(f64, f64)>,
}

struct BestSplit {
    criterion: f64,
    feature: usize,
    threshold: f64,
}

impl<'a> Grower<'a> {
    fn grow(&mut self, structure: Vec<u32>, estimation: Vec<u32>) -> u32 {
        debug_assert!(!estimation.is_empty(), "estimation part must be non-empty");

        let n_s = structure.len();
        let split = if n_s >= 2 * self.min_leaf {
            self.find_best_split(&structure)
        } else {
            None
        };

        let split = match split {
            Some(s) => s,
            None => return self.make_leaf(&estimation),
        };

        let (est_left, est_right) = partition(&estimation, self.x, split.feature, split.threshold);
        // Prune-to-parent rule: a split that would leave an estimation
        // side empty is discarded and the node stays a leaf.
        if est_left.is_empty() || est_right.is_empty() {
            return self.make_leaf(&estimation);
        }
        let (struct_left, struct_right) =
            partition(&structure, self.x, split.feature, split.threshold);

        let id = self.nodes.len() as u32;
        self.nodes.push(Node::Split {
            feature: split.feature as u32,
            threshold: split.threshold,
            left: 0,
            right: 0,
        });
        let left = self.grow(struct_left, est_left);
        let right = self.grow(struct_right, est_right);
        if let Node::Split {
            left: l, right: r, ..
        } = &mut self.nodes[id as usize]
        {
            *l = left;
            *r = right;
        }
        id
    }

    fn make_leaf(&mut self, estimation: &[u32]) -> u32 {
        let start = self.est_items.len() as u32;
        self.est_items.extend_from_slice(estimation);
        let sum: f64 = estimation.iter().map(|&i| self.y[i as usize]).sum();
        let id = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf {
            start,
            len: estimation.len() as u32,
            value: sum / estimation.len() as f64,
        });
        id
    }

    /// Variance-reduction split search on the structure part. Candidate
    /// thresholds are midpoints between consecutive distinct values; the
    /// first-encountered maximum wins, and features are visited in
    /// ascending index order, so ties resolve to the lowest feature index
    /// and then the smallest split value.
    fn find_best_split(&mut self, structure: &[u32]) -> Option<BestSplit> {
        let p = self.x.ncols();
        let n_s = structure.len();
        let mut feats: Vec<usize> = rand::seq::index::sample(&mut self.rng, p, self.mtry)
            .into_iter()
            .collect();
        feats.sort_unstable();

        let total: f64 = structure.iter().map(|&i| self.y[i as usize]).sum();
        let parent_criterion = total * total / n_s as f64;

        let mut best: Option<BestSplit> = None;
        for &f in &feats {
            self.scratch.clear();
            for &i in structure {
                self.scratch
                    .push((self.x[[i as usize, f]], self.y[i as usize]));
            }
            self.scratch
                .sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).expect("finite features"));

            let mut left_sum = 0.0;
            for c in 1..n_s {
                left_sum += self.scratch[c - 1].1;
                if c < self.min_leaf || n_s - c < self.min_leaf {
                    continue;
                }
                let a = self.scratch[c - 1].0;
                let b = self.scratch[c].0;
                if a == b {
                    continue;
                }
                let right_sum = total - left_sum;
                let criterion =
                    left_sum * left_sum / c as f64 + right_sum * right_sum / (n_s - c) as f64;
                let improves = criterion > parent_criterion
                    && best.as_ref().map_or(true, |bst| criterion > bst.criterion);
                if improves {
                    // Midpoint, nudged down if rounding lands on b so the
                    // "x <= threshold" routing matches the sorted prefix.
                    let mut threshold = 0.5 * (a + b);
                    if threshold >= b {
                        threshold = a;
                    }
                    best = Some(BestSplit {
                        criterion,
                        feature: f,
                        threshold,
                    });
                }
            }
        }
        best
    }
}

fn partition(idx: &[u32], x: &Array2<f64>, feature: usize, threshold: f64) -> (Vec<u32>, Vec<u32>) {
    let mut left = Vec::new();
    let mut right = Vec::new();
    for &i in idx {
        if x[[i as usize, feature]] <= threshold {
            left.push(i);
        } else {
            right.push(i);
        }
    }
    (left, right)
}

fn compute_oob_mse(x: &Array2<f64>, y: &Array1<f64>, trees: &[Tree]) -> f64 {
    let n = x.nrows();
    let mut sums = vec![0.0f64; n];
    let mut counts = vec![0u32; n];
    let mut in_bag = vec![false; n];
    for tree in trees {
        for &i in &tree.subsample {
            in_bag[i as usize] = true;
        }
        for i in 0..n {
            if !in_bag[i] {
                let row = x.row(i);
                let lookup = |j: usize| row[j];
                if let Node::Leaf { value, .. } = tree.leaf_at(&lookup) {
                    sums[i] += value;
                    counts[i] += 1;
                }
            }
        }
        for &i in &tree.subsample {
            in_bag[i as usize] = false;
        }
    }
    let sq: Vec<f64> = (0..n)
        .filter(|&i| counts[i] > 0)
        .map(|i| {
            let pred = sums[i] / counts[i] as f64;
            (y[i] - pred) * (y[i] - pred)
        })
        .collect();
    if sq.is_empty() {
        f64::NAN
    } else {
        crate::stats::pairwise_sum(&sq) / sq.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array1, Array2};
    use rand::Rng;

    fn toy_data(
        n: usize,
        p: usize,
        seed: u64,
        f: impl Fn(&[f64], f64) -> f64,
    ) -> (Array2<f64>, Array1<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::<f64>::zeros((n, p));
        let mut y = Array1::<f64>::zeros(n);
        for i in 0..n {
            let row: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let noise: f64 = rng.gen_range(-0.5..0.5);
            y[i] = f(&row, noise);
            for j in 0..p {
                x[[i, j]] = row[j];
            }
        }
        (x, y)
    }

    fn small_params(seed: u64) -> ForestParams {
        ForestParams {
            num_trees: 25,
            min_leaf: 5,
            mtry: 0,
            subsample_fraction: 0.5,
            honesty_fraction: 0.5,
            seed,
        }
    }

    #[test]
    fn constant_outcome_predicts_constant() {
        let (x, _) = toy_data(60, 3, 1, |_, _| 0.0);
        let y = Array1::from_elem(60, 5.0);
        let model = ForestModel::fit(x.view(), y.view(), &small_params(3)).unwrap();
        for i in 0..10 {
            let pred = model.predict(x.row(i)).unwrap();
            assert_abs_diff_eq!(pred, 5.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn honesty_off_full_subsample_single_leaf_gives_uniform_weights() {
        let (x, y) = toy_data(50, 2, 9, |r, e| r[0] + e);
        let params = ForestParams {
            num_trees: 7,
            min_leaf: 50,
            subsample_fraction: 1.0,
            honesty_fraction: 0.0,
            ..small_params(6)
        };
        let model = ForestModel::fit(x.view(), y.view(), &params).unwrap();
        let w = model.weights_at(x.row(3)).unwrap();
        assert_eq!(w.indices.len(), 50);
        for &wi in &w.weights {
            assert_abs_diff_eq!(wi, 1.0 / 50.0, epsilon = 1e-15);
        }
        let mean = crate::stats::mean(y.as_slice().unwrap());
        assert_abs_diff_eq!(model.predict(x.row(3)).unwrap(), mean, epsilon = 1e-12);
    }

    #[test]
    fn honesty_off_still_splits_and_fits_signal() {
        let (x, y) = toy_data(300, 2, 21, |r, e| 3.0 * r[0] + 0.1 * e);
        let params = ForestParams {
            num_trees: 60,
            min_leaf: 5,
            subsample_fraction: 0.5,
            honesty_fraction: 0.0,
            ..small_params(8)
        };
        let model = ForestModel::fit(x.view(), y.view(), &params).unwrap();
        let hi = model.predict(ndarray::arr1(&[0.8, 0.0]).view()).unwrap();
        let lo = model.predict(ndarray::arr1(&[-0.8, 0.0]).view()).unwrap();
        assert!(hi > 1.0, "high-signal prediction too low: {hi}");
        assert!(lo < -1.0, "low-signal prediction too high: {lo}");
        // weights still live on the probability simplex
        let w = model.weights_at(x.row(0)).unwrap();
        let total: f64 = w.weights.iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn single_tree_full_leaf_predicts_estimation_mean() {
        let (x, y) = toy_data(40, 2, 2, |r, e| r[0] + e);
        let params = ForestParams {
            num_trees: 1,
            min_leaf: 40, // no split can satisfy this
            ..small_params(5)
        };
        let model = ForestModel::fit(x.view(), y.view(), &params).unwrap();
        let est = model.tree_estimation_indices(0);
        let mean: f64 = est.iter().map(|&i| y[i as usize]).sum::<f64>() / est.len() as f64;
        let pred = model.predict(x.row(7)).unwrap();
        assert_abs_diff_eq!(pred, mean, epsilon = 1e-12);
    }

    #[test]
    fn prediction_equals_weighted_outcome_sum() {
        let (x, y) = toy_data(150, 4, 3, |r, e| 2.0 * r[0] - r[2] + e);
        let model = ForestModel::fit(x.view(), y.view(), &small_params(11)).unwrap();
        let y_slice: Vec<f64> = y.to_vec();
        for i in (0..150).step_by(17) {
            let w = model.weights_at(x.row(i)).unwrap();
            let via_weights = w.dot(&y_slice);
            let direct = model.predict(x.row(i)).unwrap();
            assert_abs_diff_eq!(via_weights, direct, epsilon = 1e-10);
            assert_abs_diff_eq!(w.sum(), 1.0, epsilon = 1e-10);
            assert!(w.weights.iter().all(|&v| v > 0.0));
            assert!(w.indices.windows(2).all(|p| p[0] < p[1]));
        }
    }

    #[test]
    fn weights_live_only_on_estimation_indices() {
        let (x, y) = toy_data(80, 3, 4, |r, e| r[1] + e);
        let params = ForestParams {
            num_trees: 1,
            ..small_params(9)
        };
        let model = ForestModel::fit(x.view(), y.view(), &params).unwrap();
        let est: std::collections::BTreeSet<usize> = model
            .tree_estimation_indices(0)
            .iter()
            .map(|&i| i as usize)
            .collect();
        for i in (0..80).step_by(11) {
            let w = model.weights_at(x.row(i)).unwrap();
            // Honesty: structure-part outcomes carry zero weight, so
            // changing them cannot move any prediction.
            assert!(w.indices.iter().all(|i| est.contains(i)));
        }
    }

    #[test]
    fn two_tree_weights_match_leaf_size_formula() {
        let (x, y) = toy_data(30, 2, 5, |r, e| r[0] + e);
        let params = ForestParams {
            num_trees: 2,
            min_leaf: 30,
            ..small_params(13)
        };
        let model = ForestModel::fit(x.view(), y.view(), &params).unwrap();
        let mut expected = vec![0.0f64; 30];
        for t in 0..2 {
            let est = model.tree_estimation_indices(t);
            for &i in est {
                expected[i as usize] += 1.0 / (2.0 * est.len() as f64);
            }
        }
        let w = model.weights_at(x.row(0)).unwrap();
        let mut got = vec![0.0f64; 30];
        for (&i, &wi) in w.indices.iter().zip(&w.weights) {
            got[i] = wi;
        }
        for i in 0..30 {
            assert_abs_diff_eq!(got[i], expected[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn same_seed_same_forest_different_seed_differs() {
        let (x, y) = toy_data(100, 3, 6, |r, e| r[0] * r[1] + e);
        let a = ForestModel::fit(x.view(), y.view(), &small_params(21)).unwrap();
        let b = ForestModel::fit(x.view(), y.view(), &small_params(21)).unwrap();
        let c = ForestModel::fit(x.view(), y.view(), &small_params(22)).unwrap();
        let pa = a.predict_batch(x.view()).unwrap();
        let pb = b.predict_batch(x.view()).unwrap();
        let pc = c.predict_batch(x.view()).unwrap();
        assert_eq!(pa, pb);
        assert_ne!(pa, pc);
    }

    #[test]
    fn fit_is_thread_count_invariant() {
        let (x, y) = toy_data(120, 3, 7, |r, e| r[0] + 0.5 * r[2] + e);
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let many = rayon::ThreadPoolBuilder::new()
            .num_threads(8)
            .build()
            .unwrap();
        let p1 = single.install(|| {
            let m = ForestModel::fit(x.view(), y.view(), &small_params(31)).unwrap();
            m.predict_batch(x.view()).unwrap()
        });
        let p8 = many.install(|| {
            let m = ForestModel::fit(x.view(), y.view(), &small_params(31)).unwrap();
            m.predict_batch(x.view()).unwrap()
        });
        assert_eq!(p1, p8);
    }

    #[test]
    fn learns_a_linear_signal() {
        let (x, y) = toy_data(1500, 5, 8, |r, e| 2.0 * r[0] + e);
        let params = ForestParams {
            num_trees: 120,
            ..small_params(17)
        };
        let model = ForestModel::fit(x.view(), y.view(), &params).unwrap();
        let preds = model.predict_batch(x.view()).unwrap();
        let truth: Vec<f64> = (0..1500).map(|i| 2.0 * x[[i, 0]]).collect();
        let mse: f64 = preds
            .iter()
            .zip(&truth)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / 1500.0;
        // Var(2 x0) = 4/3; an honest forest should explain most of it.
        assert!(
            mse < 0.35,
            "forest failed to learn linear signal, mse {mse}"
        );
    }

    #[test]
    fn oob_mse_is_finite_and_tune_prefers_better_params() {
        let (x, y) = toy_data(400, 4, 9, |r, e| r[0].signum() + 0.2 * e);
        let coarse = ForestParams {
            num_trees: 40,
            min_leaf: 400, // single-leaf trees cannot track the signal
            ..small_params(41)
        };
        let fine = ForestParams {
            num_trees: 40,
            min_leaf: 5,
            ..small_params(42)
        };
        let grid = vec![coarse.clone(), fine.clone()];
        let chosen = ForestModel::tune(x.view(), y.view(), &grid).unwrap();
        assert_eq!(chosen, fine);

        // Identical candidates tie; the first grid entry wins.
        let tie = ForestModel::tune(x.view(), y.view(), &[fine.clone(), fine.clone()]).unwrap();
        assert_eq!(tie, fine);
    }

    #[test]
    fn auto_mtry_resolves_to_sqrt_p() {
        let (x, y) = toy_data(50, 9, 10, |r, e| r[0] + e);
        let model = ForestModel::fit(x.view(), y.view(), &small_params(1)).unwrap();
        assert_eq!(model.params().mtry, 3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (x, y) = toy_data(30, 3, 11, |r, e| r[0] + e);
        let mut x_bad = x.clone();
        x_bad[[4, 1]] = f64::NAN;
        assert!(ForestModel::fit(x_bad.view(), y.view(), &small_params(0)).is_err());

        let p_bad = ForestParams {
            mtry: 4,
            ..small_params(0)
        };
        assert!(ForestModel::fit(x.view(), y.view(), &p_bad).is_err());

        let tiny_x = Array2::<f64>::zeros((1, 2));
        let tiny_y = Array1::<f64>::zeros(1);
        assert!(ForestModel::fit(tiny_x.view(), tiny_y.view(), &small_params(0)).is_err());
    }

    #[test]
    fn dimension_mismatch_on_predict_errors() {
        let (x, y) = toy_data(40, 3, 12, |r, e| r[0] + e);
        let model = ForestModel::fit(x.view(), y.view(), &small_params(2)).unwrap();
        let wrong = Array1::<f64>::zeros(5);
        assert!(model.predict(wrong.view()).is_err());
    }
}
