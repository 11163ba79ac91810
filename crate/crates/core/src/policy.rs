//! Treatment-assignment policy trees over per-arm scores.
//!
//! A policy is an axis-aligned decision tree mapping heterogeneity
//! variables to a treatment arm. Its value is the mean of the scores of
//! the assigned arms, so any candidate policy can be evaluated without
//! refitting nuisances. [`search_exact`] maximises that value exactly over
//! all trees of bounded depth with thresholds at midpoints of consecutive
//! distinct feature values; [`cross_validate_policy`] tests an
//! out-of-fold policy against each fixed single arm.

use crate::data::{Dataset, FoldAssignment};
use crate::error::{Error, Result};
use crate::nuisance::gather_rows;
use crate::scores::{mean_effect, EffectEstimate, ScoreSet};
use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Deepest tree the exact search will consider.
pub const MAX_DEPTH: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyNode {
    Leaf {
        arm: usize,
    },
    /// Observations with `z[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: Box<PolicyNode>,
        right: Box<PolicyNode>,
    },
}

impl PolicyNode {
    fn depth(&self) -> usize {
        match self {
            PolicyNode::Leaf { .. } => 0,
            PolicyNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn max_feature(&self) -> Option<usize> {
        match self {
            PolicyNode::Leaf { .. } => None,
            PolicyNode::Split {
                feature,
                left,
                right,
                ..
            } => {
                let mut m = *feature;
                if let Some(f) = left.max_feature() {
                    m = m.max(f);
                }
                if let Some(f) = right.max_feature() {
                    m = m.max(f);
                }
                Some(m)
            }
        }
    }

    fn thresholds_finite(&self) -> bool {
        match self {
            PolicyNode::Leaf { .. } => true,
            PolicyNode::Split {
                threshold,
                left,
                right,
                ..
            } => threshold.is_finite() && left.thresholds_finite() && right.thresholds_finite(),
        }
    }

    fn assign(&self, z_row: &ArrayView1<f64>) -> usize {
        match self {
            PolicyNode::Leaf { arm } => *arm,
            PolicyNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if z_row[*feature] <= *threshold {
                    left.assign(z_row)
                } else {
                    right.assign(z_row)
                }
            }
        }
    }

    fn render(&self, names: &[String], indent: usize, out: &mut String) {
        let pad = "  ".repeat(indent);
        match self {
            PolicyNode::Leaf { arm } => {
                let _ = writeln!(out, "{pad}assign arm {arm}");
            }
            PolicyNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                let name = names
                    .get(*feature)
                    .cloned()
                    .unwrap_or_else(|| format!("z{feature}"));
                let _ = writeln!(out, "{pad}if {name} <= {threshold}:");
                left.render(names, indent + 1, out);
                let _ = writeln!(out, "{pad}else:");
                right.render(names, indent + 1, out);
            }
        }
    }
}

/// Depth-bounded assignment tree. `depth` is the stated capacity; the
/// actual tree may be shallower (a single leaf is always allowed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TreeSpec", into = "TreeSpec")]
pub struct PolicyTreeModel {
    depth: usize,
    root: PolicyNode,
}

impl PolicyTreeModel {
    pub fn new(depth: usize, root: PolicyNode) -> Result<PolicyTreeModel> {
        if depth > MAX_DEPTH {
            return Err(Error::invalid_param(format!(
                "policy tree depth {depth} exceeds maximum {MAX_DEPTH}"
            )));
        }
        if root.depth() > depth {
            return Err(Error::invalid_param(format!(
                "tree of depth {} does not fit stated depth {depth}",
                root.depth()
            )));
        }
        if !root.thresholds_finite() {
            return Err(Error::invalid_param("split thresholds must be finite"));
        }
        Ok(PolicyTreeModel { depth, root })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn root(&self) -> &PolicyNode {
        &self.root
    }

    /// Arm assigned to each row. Errors if the tree references a feature
    /// beyond the columns of `z`.
    pub fn assign_all(&self, z: ArrayView2<f64>) -> Result<Vec<usize>> {
        if let Some(f) = self.root.max_feature() {
            if f >= z.ncols() {
                return Err(Error::invalid_data(format!(
                    "tree splits on feature {f} but z has {} columns",
                    z.ncols()
                )));
            }
        }
        Ok((0..z.nrows())
            .map(|i| self.root.assign(&z.row(i)))
            .collect())
    }

    /// Indented if/else rendering with one leaf or split per line. Feature
    /// names beyond `names` fall back to positional labels.
    pub fn to_text(&self, names: &[String]) -> String {
        let mut out = String::new();
        self.root.render(names, 0, &mut out);
        out
    }
}

#[derive(Serialize, Deserialize, Clone)]
struct SplitSpec {
    feature: usize,
    threshold: f64,
}

/// Flat layout of a complete binary tree: `nodes` holds the 2^depth - 1
/// internal positions in breadth-first order (None marks a subtree
/// collapsed into one leaf), `leaves` the 2^depth bottom positions. Leaf
/// slots under a collapsed node all repeat that leaf's arm.
#[derive(Serialize, Deserialize, Clone)]
struct TreeSpec {
    depth: usize,
    nodes: Vec<Option<SplitSpec>>,
    leaves: Vec<usize>,
}

impl From<PolicyTreeModel> for TreeSpec {
    fn from(model: PolicyTreeModel) -> TreeSpec {
        let depth = model.depth;
        let mut spec = TreeSpec {
            depth,
            nodes: vec![None; (1usize << depth) - 1],
            leaves: vec![0; 1usize << depth],
        };
        fill_spec(&mut spec, &model.root, 1, 0);
        spec
    }
}

/// Positions are 1-indexed heap slots: node k has children 2k and 2k+1.
fn fill_spec(spec: &mut TreeSpec, node: &PolicyNode, pos: usize, level: usize) {
    match node {
        PolicyNode::Leaf { arm } => {
            let shift = spec.depth - level;
            let first_leaf_pos = 1usize << spec.depth;
            for p in (pos << shift)..((pos + 1) << shift) {
                spec.leaves[p - first_leaf_pos] = *arm;
            }
        }
        PolicyNode::Split {
            feature,
            threshold,
            left,
            right,
        } => {
            spec.nodes[pos - 1] = Some(SplitSpec {
                feature: *feature,
                threshold: *threshold,
            });
            fill_spec(spec, left, 2 * pos, level + 1);
            fill_spec(spec, right, 2 * pos + 1, level + 1);
        }
    }
}

impl TryFrom<TreeSpec> for PolicyTreeModel {
    type Error = Error;

    fn try_from(spec: TreeSpec) -> Result<PolicyTreeModel> {
        if spec.depth > MAX_DEPTH {
            return Err(Error::invalid_data(format!(
                "policy tree depth {} exceeds maximum {MAX_DEPTH}",
                spec.depth
            )));
        }
        let want_nodes = (1usize << spec.depth) - 1;
        let want_leaves = 1usize << spec.depth;
        if spec.nodes.len() != want_nodes || spec.leaves.len() != want_leaves {
            return Err(Error::invalid_data(format!(
                "depth {} tree needs {want_nodes} node slots and {want_leaves} leaf slots, \
                 got {} and {}",
                spec.depth,
                spec.nodes.len(),
                spec.leaves.len()
            )));
        }
        let root = parse_spec(&spec, 1, 0)?;
        PolicyTreeModel::new(spec.depth, root)
    }
}

fn parse_spec(spec: &TreeSpec, pos: usize, level: usize) -> Result<PolicyNode> {
    let first_leaf_pos = 1usize << spec.depth;
    if level == spec.depth {
        return Ok(PolicyNode::Leaf {
            arm: spec.leaves[pos - first_leaf_pos],
        });
    }
    match &spec.nodes[pos - 1] {
        Some(s) => {
            if !s.threshold.is_finite() {
                return Err(Error::invalid_data("split threshold must be finite"));
            }
            Ok(PolicyNode::Split {
                feature: s.feature,
                threshold: s.threshold,
                left: Box::new(parse_spec(spec, 2 * pos, level + 1)?),
                right: Box::new(parse_spec(spec, 2 * pos + 1, level + 1)?),
            })
        }
        None => {
            // Collapsed subtree: every deeper internal slot must also be
            // empty and every covered leaf slot must agree on the arm.
            for l in (level + 1)..spec.depth {
                let shift = l - level;
                for p in (pos << shift)..((pos + 1) << shift) {
                    if spec.nodes[p - 1].is_some() {
                        return Err(Error::invalid_data(
                            "split recorded below a collapsed subtree",
                        ));
                    }
                }
            }
            let shift = spec.depth - level;
            let lo = pos << shift;
            let hi = (pos + 1) << shift;
            let arm = spec.leaves[lo - first_leaf_pos];
            for p in lo..hi {
                if spec.leaves[p - first_leaf_pos] != arm {
                    return Err(Error::invalid_data(
                        "collapsed subtree has inconsistent leaf arms",
                    ));
                }
            }
            Ok(PolicyNode::Leaf { arm })
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyValue {
    /// Mean score of the assigned arms.
    pub value: f64,
    pub se: f64,
    /// Fraction of observations sent to each arm; sums to one.
    pub shares: Vec<f64>,
    pub n: usize,
}

pub fn evaluate_policy(
    scores: &ScoreSet,
    z: ArrayView2<f64>,
    tree: &PolicyTreeModel,
) -> Result<PolicyValue> {
    let n = scores.gamma.nrows();
    let num_arms = scores.gamma.ncols();
    if z.nrows() != n {
        return Err(Error::invalid_data(format!(
            "z has {} rows but scores have {n}",
            z.nrows()
        )));
    }
    if n == 0 {
        return Err(Error::invalid_data("cannot evaluate a policy on no rows"));
    }
    let assigned = tree.assign_all(z)?;
    let mut counts = vec![0usize; num_arms];
    let mut selected = Vec::with_capacity(n);
    for (i, &a) in assigned.iter().enumerate() {
        if a >= num_arms {
            return Err(Error::invalid_data(format!(
                "leaf assigns arm {a} but scores cover {num_arms} arms"
            )));
        }
        counts[a] += 1;
        selected.push(scores.gamma[[i, a]]);
    }
    let est = mean_effect(&selected)?;
    Ok(PolicyValue {
        value: est.point,
        se: est.se,
        shares: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        n,
    })
}

struct SearchCtx<'a> {
    gamma: &'a Array2<f64>,
    z: ArrayView2<'a, f64>,
}

/// Highest-total arm over `rows`; ties go to the lower arm index.
fn best_leaf(ctx: &SearchCtx, rows: &[u32]) -> (f64, usize) {
    let num_arms = ctx.gamma.ncols();
    let mut sums = vec![0.0f64; num_arms];
    for &i in rows {
        for (a, s) in sums.iter_mut().enumerate() {
            *s += ctx.gamma[[i as usize, a]];
        }
    }
    let mut best = (sums[0], 0usize);
    for (a, &s) in sums.iter().enumerate().skip(1) {
        if s > best.0 {
            best = (s, a);
        }
    }
    best
}

fn argmax_low_tie(vals: &[f64]) -> (f64, usize) {
    let mut best = (vals[0], 0usize);
    for (a, &v) in vals.iter().enumerate().skip(1) {
        if v > best.0 {
            best = (v, a);
        }
    }
    best
}

struct SplitCand {
    value: f64,
    feature: usize,
    threshold: f64,
    left_arm: usize,
    right_arm: usize,
}

/// Best single split with leaf children, scanned feature by feature in
/// index order and threshold by threshold in value order; replacement only
/// on strict improvement, so the lexicographically first optimum wins.
fn best_depth1(ctx: &SearchCtx, orders: &[Vec<u32>]) -> Option<SplitCand> {
    let num_arms = ctx.gamma.ncols();
    let mut best: Option<SplitCand> = None;
    for (f, order) in orders.iter().enumerate() {
        let mut totals = vec![0.0f64; num_arms];
        for &i in order {
            for (a, t) in totals.iter_mut().enumerate() {
                *t += ctx.gamma[[i as usize, a]];
            }
        }
        let mut prefix = vec![0.0f64; num_arms];
        let mut suffix = vec![0.0f64; num_arms];
        for k in 0..order.len().saturating_sub(1) {
            let i = order[k] as usize;
            for (a, p) in prefix.iter_mut().enumerate() {
                *p += ctx.gamma[[i, a]];
            }
            let v_here = ctx.z[[i, f]];
            let v_next = ctx.z[[order[k + 1] as usize, f]];
            if v_next > v_here {
                let threshold = 0.5 * (v_here + v_next);
                let (lv, la) = argmax_low_tie(&prefix);
                for a in 0..num_arms {
                    suffix[a] = totals[a] - prefix[a];
                }
                let (rv, ra) = argmax_low_tie(&suffix);
                let value = lv + rv;
                if best.as_ref().map_or(true, |b| value > b.value) {
                    best = Some(SplitCand {
                        value,
                        feature: f,
                        threshold,
                        left_arm: la,
                        right_arm: ra,
                    });
                }
            }
        }
    }
    best
}

/// All admissible (feature, threshold) root candidates in tie-break order.
fn root_candidates(ctx: &SearchCtx, orders: &[Vec<u32>]) -> Vec<(usize, f64)> {
    let mut cands = Vec::new();
    for (f, order) in orders.iter().enumerate() {
        for k in 0..order.len().saturating_sub(1) {
            let v_here = ctx.z[[order[k] as usize, f]];
            let v_next = ctx.z[[order[k + 1] as usize, f]];
            if v_next > v_here {
                cands.push((f, 0.5 * (v_here + v_next)));
            }
        }
    }
    cands
}

/// Splits every per-feature order into the rows going left and right of
/// the candidate; relative order inside each side is preserved.
fn partition_orders(
    ctx: &SearchCtx,
    orders: &[Vec<u32>],
    feature: usize,
    threshold: f64,
) -> (Vec<Vec<u32>>, Vec<Vec<u32>>) {
    let mut left = Vec::with_capacity(orders.len());
    let mut right = Vec::with_capacity(orders.len());
    for order in orders {
        let mut l = Vec::new();
        let mut r = Vec::new();
        for &i in order {
            if ctx.z[[i as usize, feature]] <= threshold {
                l.push(i);
            } else {
                r.push(i);
            }
        }
        left.push(l);
        right.push(r);
    }
    (left, right)
}

/// Exact best subtree on the rows carried by `orders`. The leaf optimum is
/// the incumbent and splits must beat it strictly, so degenerate subtrees
/// are preferred whenever a split adds nothing.
fn search_node(ctx: &SearchCtx, orders: &[Vec<u32>], depth: usize) -> (f64, PolicyNode) {
    let rows = &orders[0];
    debug_assert!(!rows.is_empty(), "search nodes always carry rows");
    let (leaf_value, leaf_arm) = best_leaf(ctx, rows);
    let mut best_value = leaf_value;
    let mut best_node = PolicyNode::Leaf { arm: leaf_arm };
    if depth == 0 || rows.len() < 2 {
        return (best_value, best_node);
    }
    if depth == 1 {
        if let Some(c) = best_depth1(ctx, orders) {
            if c.value > best_value {
                best_value = c.value;
                best_node = PolicyNode::Split {
                    feature: c.feature,
                    threshold: c.threshold,
                    left: Box::new(PolicyNode::Leaf { arm: c.left_arm }),
                    right: Box::new(PolicyNode::Leaf { arm: c.right_arm }),
                };
            }
        }
        return (best_value, best_node);
    }
    let cands = root_candidates(ctx, orders);
    // Candidates evaluate in parallel; the sequential fold below restores
    // the first-strict-maximum tie-break of a plain loop.
    let evaluated: Vec<(f64, PolicyNode)> = cands
        .par_iter()
        .map(|&(f, thr)| {
            let (left_orders, right_orders) = partition_orders(ctx, orders, f, thr);
            let (lv, ln) = search_node(ctx, &left_orders, depth - 1);
            let (rv, rn) = search_node(ctx, &right_orders, depth - 1);
            (
                lv + rv,
                PolicyNode::Split {
                    feature: f,
                    threshold: thr,
                    left: Box::new(ln),
                    right: Box::new(rn),
                },
            )
        })
        .collect();
    for (v, node) in evaluated {
        if v > best_value {
            best_value = v;
            best_node = node;
        }
    }
    (best_value, best_node)
}

/// Exact maximiser of the mean assigned score over all trees of depth at
/// most `depth` with thresholds at midpoints of consecutive distinct
/// feature values. Ties break to the lower feature index, then the smaller
/// threshold, then the lower arm index, with a plain leaf preferred over
/// any split that fails to improve on it.
pub fn search_exact<'a>(
    scores: &'a ScoreSet,
    z: ArrayView2<'a, f64>,
    depth: usize,
) -> Result<PolicyTreeModel> {
    if depth == 0 || depth > MAX_DEPTH {
        return Err(Error::invalid_param(format!(
            "search depth must lie in 1..={MAX_DEPTH}, got {depth}"
        )));
    }
    let n = scores.gamma.nrows();
    if z.nrows() != n {
        return Err(Error::invalid_data(format!(
            "z has {} rows but scores have {n}",
            z.nrows()
        )));
    }
    if n < 2 {
        return Err(Error::invalid_data(format!(
            "policy search needs at least 2 observations, got {n}"
        )));
    }
    if scores.gamma.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_data("non-finite score"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_data("non-finite heterogeneity value"));
    }
    let ctx = SearchCtx {
        gamma: &scores.gamma,
        z,
    };
    if z.ncols() == 0 {
        let rows: Vec<u32> = (0..n as u32).collect();
        let (_, best_arm) = best_leaf(&ctx, &rows);
        return PolicyTreeModel::new(depth, PolicyNode::Leaf { arm: best_arm });
    }
    let orders: Vec<Vec<u32>> = (0..z.ncols())
        .map(|f| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| {
                z[[a as usize, f]]
                    .partial_cmp(&z[[b as usize, f]])
                    .expect("finiteness checked")
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect();
    let (_, root) = search_node(&ctx, &orders, depth);
    PolicyTreeModel::new(depth, root)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvPolicyTest {
    pub depth: usize,
    /// Arm chosen for each observation by the tree fitted without its fold.
    pub assignments: Vec<usize>,
    /// Mean of (score of the out-of-fold policy) minus (score of arm w),
    /// one estimate per fixed arm w, each over all N observations.
    pub per_arm: Vec<EffectEstimate>,
}

/// Fits one tree per fold on the complement, assigns the held-out fold,
/// then tests the stitched-together assignment against every fixed arm.
pub fn cross_validate_policy(
    ds: &Dataset,
    scores: &ScoreSet,
    z: ArrayView2<f64>,
    depth: usize,
    folds: &FoldAssignment,
) -> Result<CvPolicyTest> {
    let n = ds.n();
    let num_arms = scores.gamma.ncols();
    if scores.gamma.nrows() != n || z.nrows() != n {
        return Err(Error::invalid_data(format!(
            "scores ({} rows) and z ({} rows) must match the dataset ({n} rows)",
            scores.gamma.nrows(),
            z.nrows()
        )));
    }
    if num_arms != ds.num_arms {
        return Err(Error::invalid_data(format!(
            "scores cover {num_arms} arms but the dataset has {}",
            ds.num_arms
        )));
    }
    if folds.fold.len() != n {
        return Err(Error::invalid_data(format!(
            "fold assignment covers {} observations, dataset has {n}",
            folds.fold.len()
        )));
    }
    let per_fold: Vec<(Vec<usize>, Vec<usize>)> = (0..folds.num_folds)
        .into_par_iter()
        .map(|k| -> Result<(Vec<usize>, Vec<usize>)> {
            let test = folds.in_fold(k);
            if test.is_empty() {
                return Ok((test, Vec::new()));
            }
            let train = folds.out_of_fold(k);
            let sub = ScoreSet {
                gamma: gather_rows(&scores.gamma.view(), &train),
            };
            let sub_z = gather_rows(&z, &train);
            let tree = search_exact(&sub, sub_z.view(), depth)
                .map_err(|e| e.in_stage(format!("policy search without fold {k}")))?;
            let all = tree.assign_all(z)?;
            let picked = test.iter().map(|&i| all[i]).collect();
            Ok((test, picked))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut assignments = vec![0usize; n];
    for (test, picked) in &per_fold {
        for (&i, &a) in test.iter().zip(picked) {
            assignments[i] = a;
        }
    }
    let mut per_arm = Vec::with_capacity(num_arms);
    for w in 0..num_arms {
        let deltas: Vec<f64> = (0..n)
            .map(|i| scores.gamma[[i, assignments[i]]] - scores.gamma[[i, w]])
            .collect();
        per_arm.push(mean_effect(&deltas)?);
    }
    Ok(CvPolicyTest {
        depth,
        assignments,
        per_arm,
    })
}

/// Share of rows the two trees send to the same arm.
pub fn policy_agreement(
    tree_a: &PolicyTreeModel,
    tree_b: &PolicyTreeModel,
    z: ArrayView2<f64>,
) -> Result<f64> {
    if z.nrows() == 0 {
        return Err(Error::invalid_data("cannot measure agreement on zero rows"));
    }
    let a = tree_a.assign_all(z)?;
    let b = tree_b.assign_all(z)?;
    let same = a.iter().zip(&b).filter(|(x, y)| x == y).count();
    Ok(same as f64 / z.nrows() as f64)
}
