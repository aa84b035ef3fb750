//! CART-style trees: Gini classification trees and multivariate regression
//! trees whose node impurity is the multi-target sum of squared errors.
//!
//! Trees are stored as a flat arena with the root at index 0. A sample goes
//! left at an internal node when `x[feature] <= threshold`.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

/// Splits whose impurity decrease is below this fraction of the node's
/// per-sample impurity are treated as zero (floating-point noise).
pub const MIN_RELATIVE_DECREASE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    /// `None` grows until the other stopping rules apply.
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    /// Candidate features examined at each node.
    pub mtry: usize,
}

impl TreeParams {
    pub fn classification(mtry: usize) -> Self {
        Self {
            max_depth: None,
            min_samples_split: 2,
            min_samples_leaf: 1,
            mtry,
        }
    }

    pub fn regression(mtry: usize) -> Self {
        Self {
            max_depth: None,
            min_samples_split: 2,
            min_samples_leaf: 5,
            mtry,
        }
    }

    fn validate(&self, n_features: usize) -> Result<()> {
        if self.min_samples_split < 2 {
            return Err(Error::InvalidInput("min_samples_split must be >= 2".into()));
        }
        if self.min_samples_leaf < 1 {
            return Err(Error::InvalidInput("min_samples_leaf must be >= 1".into()));
        }
        if self.mtry < 1 || self.mtry > n_features {
            return Err(Error::InvalidInput(format!(
                "mtry must be in [1, {n_features}], got {}",
                self.mtry
            )));
        }
        Ok(())
    }
}

/// Training targets for a tree, which also select the impurity measure.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// Class indices in `0..n_classes`; Gini impurity.
    Classes { labels: &'a [usize], n_classes: usize },
    /// One row of targets per sample; multi-target SSE impurity.
    Values(&'a Matrix),
}

impl Targets<'_> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(y) => y.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Width of a leaf prediction: class count or target dimension.
    pub fn output_dim(&self) -> usize {
        match self {
            Targets::Classes { n_classes, .. } => *n_classes,
            Targets::Values(y) => y.cols(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    /// Class histogram (classification) or per-target means (regression).
    Leaf { value: Vec<f64>, n_samples: usize },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub n_features: usize,
    pub nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub impurity_decrease: f64,
}

/// Threshold strictly between two adjacent distinct values, `lo <= t < hi`.
pub fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid >= hi {
        lo
    } else {
        mid
    }
}

/// Gini impurity from class counts over `n` samples.
pub fn gini_from_counts(counts: &[f64], n: f64) -> f64 {
    let sum_sq: f64 = counts.iter().map(|&c| (c / n) * (c / n)).sum();
    1.0 - sum_sq
}

/// `1 - sum_c p_c^2` over the label multiset.
pub fn gini_impurity<L: Ord + Clone>(labels: &[L]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("gini impurity of an empty label set".into()));
    }
    let mut sorted = labels.to_vec();
    sorted.sort();
    let mut counts = Vec::new();
    let mut run = 1.0;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1.0;
        } else {
            counts.push(run);
            run = 1.0;
        }
    }
    counts.push(run);
    Ok(gini_from_counts(&counts, labels.len() as f64))
}

/// Multi-target sum of squared errors: `sum_j sum_i (y_ij - mean_j)^2`.
pub fn mt_sse(targets: &Matrix) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::InvalidInput("SSE of an empty target matrix".into()));
    }
    let n = targets.rows() as f64;
    let mut total = 0.0;
    for j in 0..targets.cols() {
        let mean = (0..targets.rows()).map(|i| targets.get(i, j)).sum::<f64>() / n;
        total += (0..targets.rows())
            .map(|i| {
                let d = targets.get(i, j) - mean;
                d * d
            })
            .sum::<f64>();
    }
    Ok(total)
}

/// Per-sample impurity of the rows in `rows`: Gini, or SSE / n.
fn node_impurity(targets: Targets<'_>, rows: &[usize]) -> f64 {
    let n = rows.len() as f64;
    match targets {
        Targets::Classes { labels, n_classes } => {
            let mut counts = vec![0.0; n_classes];
            for &r in rows {
                counts[labels[r]] += 1.0;
            }
            gini_from_counts(&counts, n)
        }
        Targets::Values(y) => {
            let mut sse = 0.0;
            for j in 0..y.cols() {
                let mean = rows.iter().map(|&r| y.get(r, j)).sum::<f64>() / n;
                sse += rows
                    .iter()
                    .map(|&r| {
                        let d = y.get(r, j) - mean;
                        d * d
                    })
                    .sum::<f64>();
            }
            sse / n
        }
    }
}

fn is_pure(targets: Targets<'_>, rows: &[usize]) -> bool {
    let first = rows[0];
    match targets {
        Targets::Classes { labels, .. } => rows.iter().all(|&r| labels[r] == labels[first]),
        Targets::Values(y) => rows.iter().all(|&r| y.row(r) == y.row(first)),
    }
}

fn leaf_value(targets: Targets<'_>, rows: &[usize]) -> Vec<f64> {
    match targets {
        Targets::Classes { labels, n_classes } => {
            let mut counts = vec![0.0; n_classes];
            for &r in rows {
                counts[labels[r]] += 1.0;
            }
            counts
        }
        Targets::Values(y) => {
            let n = rows.len() as f64;
            (0..y.cols())
                .map(|j| rows.iter().map(|&r| y.get(r, j)).sum::<f64>() / n)
                .collect()
        }
    }
}

/// Exhaustive best split of `rows` over `features`.
///
/// Every midpoint between adjacent distinct sorted values is scored by
/// `I(node) - (n_L/n) I(left) - (n_R/n) I(right)` with per-sample impurity
/// (Gini, or SSE/n for targets). Both children need `min_samples_leaf` rows.
/// Ties go to the lowest feature index, then the lowest threshold. Two
/// decreases within `MIN_RELATIVE_DECREASE * I(node)` of each other count as
/// tied, so summation-order rounding cannot reorder exact ties.
pub fn best_split(
    x: &Matrix,
    targets: Targets<'_>,
    rows: &[usize],
    features: &[usize],
    min_samples_leaf: usize,
) -> Option<SplitCandidate> {
    if rows.len() < 2 || rows.len() < 2 * min_samples_leaf {
        return None;
    }
    let parent = node_impurity(targets, rows);
    let mut feats = features.to_vec();
    feats.sort_unstable();
    feats.dedup();

    let mut sorted: Vec<(f64, usize)> = Vec::with_capacity(rows.len());
    let mut best: Option<SplitCandidate> = None;
    let mut scratch = SweepScratch::new(targets);
    for &f in &feats {
        sorted.clear();
        sorted.extend(rows.iter().map(|&r| (x.get(r, f), r)));
        sorted.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if sorted[0].0 == sorted[sorted.len() - 1].0 {
            continue;
        }
        scratch.sweep(targets, &sorted, parent, min_samples_leaf, |i, decrease| {
            let threshold = midpoint(sorted[i].0, sorted[i + 1].0);
            let better = match best {
                None => true,
                Some(b) => decrease - b.impurity_decrease > MIN_RELATIVE_DECREASE * parent,
            };
            if better {
                best = Some(SplitCandidate {
                    feature: f,
                    threshold,
                    impurity_decrease: decrease,
                });
            }
        });
    }
    best.filter(|b| accept_decrease(b.impurity_decrease, parent))
}

/// Whether a decrease counts as a real improvement for a node of impurity `parent`.
pub fn accept_decrease(decrease: f64, parent: f64) -> bool {
    decrease > 0.0 && decrease > MIN_RELATIVE_DECREASE * parent
}

/// Running sufficient statistics for a left-to-right sweep.
struct SweepScratch {
    left: Vec<f64>,
    total: Vec<f64>,
    left_sq: Vec<f64>,
    total_sq: Vec<f64>,
    mean: Vec<f64>,
}

impl SweepScratch {
    fn new(targets: Targets<'_>) -> Self {
        let m = targets.output_dim();
        Self {
            left: vec![0.0; m],
            total: vec![0.0; m],
            left_sq: vec![0.0; m],
            total_sq: vec![0.0; m],
            mean: vec![0.0; m],
        }
    }

    /// Calls `emit(i, decrease)` for each admissible split between sorted
    /// positions `i` and `i + 1`, in ascending threshold order.
    fn sweep(
        &mut self,
        targets: Targets<'_>,
        sorted: &[(f64, usize)],
        parent: f64,
        min_leaf: usize,
        mut emit: impl FnMut(usize, f64),
    ) {
        let n = sorted.len();
        let nf = n as f64;
        match targets {
            Targets::Classes { labels, .. } => {
                self.left.iter_mut().for_each(|c| *c = 0.0);
                self.total.iter_mut().for_each(|c| *c = 0.0);
                for &(_, r) in sorted {
                    self.total[labels[r]] += 1.0;
                }
                let mut right = self.total.clone();
                for i in 0..n - 1 {
                    let c = labels[sorted[i].1];
                    self.left[c] += 1.0;
                    right[c] -= 1.0;
                    let n_left = i + 1;
                    let n_right = n - n_left;
                    if sorted[i].0 == sorted[i + 1].0 || n_left < min_leaf || n_right < min_leaf {
                        continue;
                    }
                    let (nl, nr) = (n_left as f64, n_right as f64);
                    let gl = gini_from_counts(&self.left, nl);
                    let gr = gini_from_counts(&right, nr);
                    emit(i, parent - (nl / nf) * gl - (nr / nf) * gr);
                }
            }
            Targets::Values(y) => {
                let m = y.cols();
                for j in 0..m {
                    self.mean[j] = sorted.iter().map(|&(_, r)| y.get(r, j)).sum::<f64>() / nf;
                    self.left[j] = 0.0;
                    self.left_sq[j] = 0.0;
                    self.total[j] = 0.0;
                    self.total_sq[j] = 0.0;
                }
                for &(_, r) in sorted {
                    for j in 0..m {
                        let d = y.get(r, j) - self.mean[j];
                        self.total[j] += d;
                        self.total_sq[j] += d * d;
                    }
                }
                let sse_total: f64 = (0..m)
                    .map(|j| self.total_sq[j] - self.total[j] * self.total[j] / nf)
                    .sum();
                for i in 0..n - 1 {
                    let r = sorted[i].1;
                    for j in 0..m {
                        let d = y.get(r, j) - self.mean[j];
                        self.left[j] += d;
                        self.left_sq[j] += d * d;
                    }
                    let n_left = i + 1;
                    let n_right = n - n_left;
                    if sorted[i].0 == sorted[i + 1].0 || n_left < min_leaf || n_right < min_leaf {
                        continue;
                    }
                    let (nl, nr) = (n_left as f64, n_right as f64);
                    let mut sse_children = 0.0;
                    for j in 0..m {
                        let sr = self.total[j] - self.left[j];
                        let qr = self.total_sq[j] - self.left_sq[j];
                        sse_children += self.left_sq[j] - self.left[j] * self.left[j] / nl;
                        sse_children += qr - sr * sr / nr;
                    }
                    emit(i, (sse_total - sse_children) / nf);
                }
            }
        }
    }
}

/// Grows a tree on every row of `x`.
pub fn grow_tree(x: &Matrix, targets: Targets<'_>, params: &TreeParams, rng: &mut Rng) -> Result<Tree> {
    let rows: Vec<usize> = (0..x.rows()).collect();
    grow_tree_on(x, targets, &rows, params, rng)
}

/// Grows a tree on the given sample of row indices (repeats allowed, as in a
/// bootstrap sample). Node feature subsets of size `mtry` are drawn from `rng`.
pub fn grow_tree_on(
    x: &Matrix,
    targets: Targets<'_>,
    rows: &[usize],
    params: &TreeParams,
    rng: &mut Rng,
) -> Result<Tree> {
    if rows.is_empty() || x.is_empty() {
        return Err(Error::InvalidInput("cannot grow a tree on zero rows".into()));
    }
    if targets.len() != x.rows() {
        return Err(Error::InvalidInput(format!(
            "{} feature rows but {} targets",
            x.rows(),
            targets.len()
        )));
    }
    params.validate(x.cols())?;

    let p = x.cols();
    let mut nodes: Vec<Node> = Vec::new();
    // (node slot, rows, depth)
    let mut stack: Vec<(usize, Vec<usize>, usize)> = Vec::new();
    nodes.push(Node::Leaf {
        value: Vec::new(),
        n_samples: 0,
    });
    stack.push((0, rows.to_vec(), 0));

    while let Some((slot, node_rows, depth)) = stack.pop() {
        let stop = params.max_depth.is_some_and(|d| depth >= d)
            || node_rows.len() < params.min_samples_split
            || is_pure(targets, &node_rows);
        let split = if stop {
            None
        } else {
            let mut features = index::sample(rng, p, params.mtry).into_vec();
            features.sort_unstable();
            best_split(x, targets, &node_rows, &features, params.min_samples_leaf)
        };
        match split {
            None => {
                nodes[slot] = Node::Leaf {
                    value: leaf_value(targets, &node_rows),
                    n_samples: node_rows.len(),
                };
            }
            Some(s) => {
                let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = node_rows
                    .iter()
                    .partition(|&&r| x.get(r, s.feature) <= s.threshold);
                let left = nodes.len();
                let right = left + 1;
                let placeholder = Node::Leaf {
                    value: Vec::new(),
                    n_samples: 0,
                };
                nodes.push(placeholder.clone());
                nodes.push(placeholder);
                nodes[slot] = Node::Split {
                    feature: s.feature,
                    threshold: s.threshold,
                    left,
                    right,
                };
                // left subtree is expanded first
                stack.push((right, right_rows, depth + 1));
                stack.push((left, left_rows, depth + 1));
            }
        }
    }
    Ok(Tree { n_features: p, nodes })
}

impl Tree {
    /// Leaf prediction for `x`.
    pub fn predict(&self, x: &[f64]) -> Result<&[f64]> {
        if x.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                actual: x.len(),
            });
        }
        Ok(self.predict_unchecked(x))
    }

    pub(crate) fn predict_unchecked(&self, x: &[f64]) -> &[f64] {
        self.leaf_for(x).0
    }

    fn leaf_for(&self, x: &[f64]) -> (&[f64], usize) {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value, n_samples } => return (value, *n_samples),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    /// Depth of the deepest leaf (a lone root leaf has depth 0).
    pub fn depth(&self) -> usize {
        let mut max = 0;
        let mut stack = vec![(0usize, 0usize)];
        while let Some((i, d)) = stack.pop() {
            match &self.nodes[i] {
                Node::Leaf { .. } => max = max.max(d),
                Node::Split { left, right, .. } => {
                    stack.push((*left, d + 1));
                    stack.push((*right, d + 1));
                }
            }
        }
        max
    }

    /// Features tested by at least one internal node.
    pub fn used_features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    /// Smallest leaf sample count.
    pub fn min_leaf_size(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Leaf { n_samples, .. } => Some(*n_samples),
                Node::Split { .. } => None,
            })
            .min()
            .unwrap_or(0)
    }
}
