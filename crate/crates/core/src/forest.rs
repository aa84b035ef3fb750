//! Bagged tree ensembles with per-node random feature subsets.
//!
//! Tree `t` draws its bootstrap sample and its feature subsets from generators
//! seeded by `(seed, t)`, so a forest is the same whether its trees were grown
//! serially or on a thread pool. Bootstrap samples are not stored in model
//! files; [`ForestModel::in_bag`] replays them from the seed.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{score_classification, score_regression};
use crate::matrix::Matrix;
use crate::par::{map_indices, Execution};
use crate::rng::{derive_seed, derive_seed_path, rng_from};
use crate::tree::{grow_tree_on, Targets, Tree, TreeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForestKind {
    Classifier,
    Regressor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// `n` rows drawn with replacement.
    Bootstrap,
    /// Every tree sees every row once. Test hook; leaves no out-of-bag rows.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub seed: u64,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    /// `None`: 1 for classifiers, 5 for regressors.
    pub min_samples_leaf: Option<usize>,
    /// `None`: `ceil(sqrt(p))` for classifiers, `max(1, p / 3)` for regressors.
    pub mtry: Option<usize>,
    pub sampling: Sampling,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 200,
            seed: 0,
            max_depth: None,
            min_samples_split: 2,
            min_samples_leaf: None,
            mtry: None,
            sampling: Sampling::Bootstrap,
        }
    }
}

impl ForestParams {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_trees(mut self, n_trees: usize) -> Self {
        self.n_trees = n_trees;
        self
    }

    /// Concrete tree parameters for `p` features.
    pub fn tree_params(&self, kind: ForestKind, p: usize) -> TreeParams {
        let base = match kind {
            ForestKind::Classifier => TreeParams::classification(((p as f64).sqrt().ceil() as usize).max(1)),
            ForestKind::Regressor => TreeParams::regression((p / 3).max(1)),
        };
        TreeParams {
            max_depth: self.max_depth,
            min_samples_split: self.min_samples_split,
            min_samples_leaf: self.min_samples_leaf.unwrap_or(base.min_samples_leaf),
            mtry: self.mtry.unwrap_or(base.mtry).min(p.max(1)),
        }
    }
}

/// Targets accepted by [`ForestModel::fit`].
#[derive(Debug, Clone, Copy)]
pub enum ForestTargets<'a> {
    Labels(&'a [u32]),
    Values(&'a Matrix),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    R2,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ForestModel {
    pub kind: ForestKind,
    pub params: ForestParams,
    pub tree_params: TreeParams,
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
    /// Sorted class labels; leaf histograms index into this list.
    pub classes: Vec<u32>,
    pub n_train: usize,
    /// Classifier trained on a single class: always predicts it.
    pub degenerate: bool,
    pub trees: Vec<Tree>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OobScore {
    pub score: f64,
    pub covered: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImportance {
    pub feature: String,
    pub importance: f64,
}

fn bootstrap_sample(params: &ForestParams, tree: usize, n: usize) -> Vec<usize> {
    match params.sampling {
        Sampling::Identity => (0..n).collect(),
        Sampling::Bootstrap => {
            let mut rng = rng_from(derive_seed_path(params.seed, &[tree as u64, 0]));
            (0..n).map(|_| rng.random_range(0..n)).collect()
        }
    }
}

impl ForestModel {
    pub fn fit(x: &Matrix, y: ForestTargets<'_>, params: &ForestParams) -> Result<Self> {
        Self::fit_with(x, y, params, Execution::default())
    }

    pub fn fit_with(x: &Matrix, y: ForestTargets<'_>, params: &ForestParams, exec: Execution) -> Result<Self> {
        let n = x.rows();
        if n < 2 {
            return Err(Error::InvalidInput(format!("forest needs at least 2 rows, got {n}")));
        }
        if x.cols() == 0 {
            return Err(Error::InvalidInput("forest needs at least one feature".into()));
        }
        if params.n_trees < 1 {
            return Err(Error::InvalidInput("n_trees must be >= 1".into()));
        }
        if let Some(m) = params.mtry {
            if m < 1 || m > x.cols() {
                return Err(Error::InvalidInput(format!("mtry {m} outside [1, {}]", x.cols())));
            }
        }
        if x.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }

        let (kind, classes, class_idx, target_names) = match y {
            ForestTargets::Labels(labels) => {
                if labels.len() != n {
                    return Err(Error::InvalidInput(format!("{n} rows but {} labels", labels.len())));
                }
                let mut classes = labels.to_vec();
                classes.sort_unstable();
                classes.dedup();
                let idx: Vec<usize> = labels
                    .iter()
                    .map(|l| classes.binary_search(l).expect("label is in class list"))
                    .collect();
                (ForestKind::Classifier, classes, idx, vec!["class".to_string()])
            }
            ForestTargets::Values(v) => {
                if v.rows() != n {
                    return Err(Error::InvalidInput(format!("{n} rows but {} target rows", v.rows())));
                }
                if v.cols() == 0 {
                    return Err(Error::InvalidInput("regression needs at least one target".into()));
                }
                if v.as_slice().iter().any(|t| !t.is_finite()) {
                    return Err(Error::InvalidInput("non-finite target value".into()));
                }
                let names = (0..v.cols()).map(|j| format!("target_{j}")).collect();
                (ForestKind::Regressor, Vec::new(), Vec::new(), names)
            }
        };
        let targets = match y {
            ForestTargets::Labels(_) => Targets::Classes {
                labels: &class_idx,
                n_classes: classes.len(),
            },
            ForestTargets::Values(v) => Targets::Values(v),
        };
        let tree_params = params.tree_params(kind, x.cols());
        let trees = map_indices(params.n_trees, exec, |t| {
            let rows = bootstrap_sample(params, t, n);
            let mut rng = rng_from(derive_seed_path(params.seed, &[t as u64, 1]));
            grow_tree_on(x, targets, &rows, &tree_params, &mut rng)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            kind,
            params: *params,
            tree_params,
            feature_names: (0..x.cols()).map(|j| format!("x{j}")).collect(),
            target_names,
            degenerate: kind == ForestKind::Classifier && classes.len() == 1,
            classes,
            n_train: n,
            trees,
        })
    }

    pub fn with_names(mut self, features: Vec<String>, targets: Vec<String>) -> Self {
        if features.len() == self.feature_names.len() {
            self.feature_names = features;
        }
        if targets.len() == self.target_names.len() {
            self.target_names = targets;
        }
        self
    }

    pub fn n_features(&self) -> usize {
        self.trees.first().map_or(self.feature_names.len(), |t| t.n_features)
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features() {
            return Err(Error::DimensionMismatch {
                expected: self.n_features(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Summed leaf histograms of the selected trees, in `classes` order.
    fn vote<'a>(&self, x: &[f64], trees: impl Iterator<Item = &'a Tree>) -> Vec<f64> {
        let mut acc = vec![0.0; self.classes.len()];
        for t in trees {
            for (a, h) in acc.iter_mut().zip(t.predict_unchecked(x)) {
                *a += h;
            }
        }
        acc
    }

    fn argmax_class(&self, votes: &[f64]) -> u32 {
        let mut best = 0;
        for (i, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = i;
            }
        }
        self.classes[best]
    }

    fn mean_output<'a>(&self, x: &[f64], trees: impl Iterator<Item = &'a Tree>) -> Vec<f64> {
        let mut acc = vec![0.0; self.target_names.len()];
        let mut count = 0usize;
        for t in trees {
            for (a, v) in acc.iter_mut().zip(t.predict_unchecked(x)) {
                *a += v;
            }
            count += 1;
        }
        acc.iter_mut().for_each(|a| *a /= count as f64);
        acc
    }

    /// Summed class histograms over all trees, aligned with `classes`.
    pub fn class_votes(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.require(ForestKind::Classifier)?;
        self.check_dim(x)?;
        Ok(self.vote(x, self.trees.iter()))
    }

    /// Majority class; ties go to the smallest class label.
    pub fn predict_class(&self, x: &[f64]) -> Result<u32> {
        let votes = self.class_votes(x)?;
        Ok(self.argmax_class(&votes))
    }

    /// Mean of the per-tree target vectors.
    pub fn predict_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.require(ForestKind::Regressor)?;
        self.check_dim(x)?;
        Ok(self.mean_output(x, self.trees.iter()))
    }

    pub fn predict_classes(&self, x: &Matrix) -> Result<Vec<u32>> {
        self.predict_classes_with(x, Execution::default())
    }

    pub fn predict_classes_with(&self, x: &Matrix, exec: Execution) -> Result<Vec<u32>> {
        map_indices(x.rows(), exec, |i| self.predict_class(x.row(i)))
            .into_iter()
            .collect()
    }

    pub fn predict_matrix(&self, x: &Matrix) -> Result<Matrix> {
        self.predict_matrix_with(x, Execution::default())
    }

    pub fn predict_matrix_with(&self, x: &Matrix, exec: Execution) -> Result<Matrix> {
        let rows = map_indices(x.rows(), exec, |i| self.predict_values(x.row(i)))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.target_names.len()));
        }
        Matrix::from_rows(&rows)
    }

    fn require(&self, kind: ForestKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::InvalidInput(format!(
                "operation needs a {kind:?} but the model is a {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Replays tree `t`'s bootstrap sample.
    pub fn in_bag(&self, t: usize) -> Vec<usize> {
        bootstrap_sample(&self.params, t, self.n_train)
    }

    /// `mask[t][i]` is true when row `i` is out of bag for tree `t`.
    fn oob_mask(&self) -> Vec<Vec<bool>> {
        (0..self.trees.len())
            .map(|t| {
                let mut oob = vec![true; self.n_train];
                for r in self.in_bag(t) {
                    oob[r] = false;
                }
                oob
            })
            .collect()
    }

    /// Fraction of rows out of bag for each tree.
    pub fn oob_fractions(&self) -> Vec<f64> {
        self.oob_mask()
            .iter()
            .map(|m| m.iter().filter(|&&b| b).count() as f64 / self.n_train as f64)
            .collect()
    }

    fn check_training_data(&self, x: &Matrix, y: ForestTargets<'_>) -> Result<()> {
        let ny = match y {
            ForestTargets::Labels(l) => l.len(),
            ForestTargets::Values(v) => v.rows(),
        };
        if x.rows() != self.n_train || ny != self.n_train {
            return Err(Error::InvalidInput(format!(
                "out-of-bag scoring needs the {} training rows, got {} features / {} targets",
                self.n_train,
                x.rows(),
                ny
            )));
        }
        if x.cols() != self.n_features() {
            return Err(Error::DimensionMismatch {
                expected: self.n_features(),
                actual: x.cols(),
            });
        }
        Ok(())
    }

    fn oob_metric(&self, x: &Matrix, y: ForestTargets<'_>, metric: Metric, mask: &[Vec<bool>], covered: &[usize]) -> Result<f64> {
        let trees_for = |i: usize| {
            self.trees
                .iter()
                .zip(mask)
                .filter(move |(_, m)| m[i])
                .map(|(t, _)| t)
        };
        match (self.kind, y) {
            (ForestKind::Classifier, ForestTargets::Labels(labels)) => {
                let pred: Vec<u32> = covered
                    .iter()
                    .map(|&i| self.argmax_class(&self.vote(x.row(i), trees_for(i))))
                    .collect();
                let truth: Vec<u32> = covered.iter().map(|&i| labels[i]).collect();
                match metric {
                    Metric::Accuracy => score_classification(&pred, &truth),
                    Metric::R2 => {
                        let p: Vec<f64> = pred.iter().map(|&v| v as f64).collect();
                        let t: Vec<f64> = truth.iter().map(|&v| v as f64).collect();
                        score_regression(&Matrix::column(&p), &Matrix::column(&t))
                    }
                }
            }
            (ForestKind::Regressor, ForestTargets::Values(values)) => {
                if metric != Metric::R2 {
                    return Err(Error::InvalidInput("regressors are scored with R2".into()));
                }
                let pred: Vec<Vec<f64>> = covered
                    .iter()
                    .map(|&i| self.mean_output(x.row(i), trees_for(i)))
                    .collect();
                let truth = values.select_rows(covered);
                score_regression(&Matrix::from_rows(&pred)?, &truth)
            }
            _ => Err(Error::InvalidInput("targets do not match the model kind".into())),
        }
    }

    fn covered_rows(&self, mask: &[Vec<bool>]) -> Vec<usize> {
        (0..self.n_train).filter(|&i| mask.iter().any(|m| m[i])).collect()
    }

    /// Metric over rows predicted only by trees that did not see them.
    pub fn oob_score(&self, x: &Matrix, y: ForestTargets<'_>, metric: Metric) -> Result<OobScore> {
        self.check_training_data(x, y)?;
        let mask = self.oob_mask();
        let covered = self.covered_rows(&mask);
        if covered.is_empty() {
            return Err(Error::NoOobCoverage { rows: self.n_train });
        }
        let score = self.oob_metric(x, y, metric, &mask, &covered)?;
        Ok(OobScore {
            score,
            covered: covered.len(),
            skipped: self.n_train - covered.len(),
        })
    }

    /// Permutation importance: mean drop of the OOB metric when one column is
    /// shuffled among the covered rows.
    pub fn variable_importance(
        &self,
        x: &Matrix,
        y: ForestTargets<'_>,
        metric: Metric,
        n_permutations: usize,
        seed: u64,
    ) -> Result<Vec<FeatureImportance>> {
        self.variable_importance_with(x, y, metric, n_permutations, seed, Execution::default())
    }

    pub fn variable_importance_with(
        &self,
        x: &Matrix,
        y: ForestTargets<'_>,
        metric: Metric,
        n_permutations: usize,
        seed: u64,
        exec: Execution,
    ) -> Result<Vec<FeatureImportance>> {
        self.check_training_data(x, y)?;
        if n_permutations == 0 {
            return Err(Error::InvalidInput("n_permutations must be >= 1".into()));
        }
        let mask = self.oob_mask();
        let covered = self.covered_rows(&mask);
        if covered.is_empty() {
            return Err(Error::NoOobCoverage { rows: self.n_train });
        }
        let baseline = self.oob_metric(x, y, metric, &mask, &covered)?;
        let per_feature = map_indices(x.cols(), exec, |f| -> Result<f64> {
            let mut total = 0.0;
            for rep in 0..n_permutations {
                let mut rng = rng_from(derive_seed_path(seed, &[f as u64, rep as u64]));
                let mut values: Vec<f64> = covered.iter().map(|&i| x.get(i, f)).collect();
                values.shuffle(&mut rng);
                let mut permuted = x.clone();
                for (&i, v) in covered.iter().zip(values) {
                    permuted.set(i, f, v);
                }
                total += baseline - self.oob_metric(&permuted, y, metric, &mask, &covered)?;
            }
            Ok(total / n_permutations as f64)
        });
        per_feature
            .into_iter()
            .zip(&self.feature_names)
            .map(|(imp, name)| {
                Ok(FeatureImportance {
                    feature: name.clone(),
                    importance: imp?,
                })
            })
            .collect()
    }
}

/// Seed for a named sub-model, e.g. one classifier per nutrient.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    derive_seed(seed, tag)
}
