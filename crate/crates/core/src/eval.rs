//! Hold-out splits, k-fold cross-validation, accuracy metrics and the
//! per-nutrient accuracy tables.
//!
//! Stage-two "accuracy" is the coefficient of determination averaged
//! uniformly over the regression targets.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{FieldSeasonRecord, Nutrient};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par::{map_indices, Execution};
use crate::pipeline::{self, Mode, PipelineParams};
use crate::rng::{derive_seed, derive_seed_path, rng_from};

/// Seeded shuffle, then the first `ceil((1 - f) n)` items train and the rest test.
pub fn split<T: Clone>(items: &[T], test_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "test fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let n = items.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("cannot split {n} records")));
    }
    let order = shuffled(n, seed);
    // ceil((1 - f) n) == n - floor(f n); the epsilon absorbs representation error in f
    let n_test = ((test_fraction * n as f64) + 1e-9).floor() as usize;
    let n_train = n - n_test.min(n - 1);
    let train = order[..n_train].iter().map(|&i| items[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| items[i].clone()).collect();
    Ok((train, test))
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(seed));
    order
}

/// Shuffled index folds: the first `n % k` folds hold `ceil(n/k)` items, the
/// rest `floor(n/k)`.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("k-fold needs k >= 2, got {k}")));
    }
    if n < k {
        return Err(Error::InvalidInput(format!("k-fold with k = {k} needs at least {k} records, got {n}")));
    }
    let order = shuffled(n, seed);
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub scores: Vec<f64>,
    /// Folds whose trainer or scorer failed; each scored 0.
    pub failed_folds: Vec<usize>,
}

impl CvResult {
    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }

    pub fn std(&self) -> f64 {
        cv_std(&self.scores)
    }
}

/// k-fold cross-validation: train on the complement of each fold, score on it.
pub fn kfold_cv<T, M, Tr, Sc>(items: &[T], k: usize, seed: u64, trainer: Tr, scorer: Sc) -> Result<CvResult>
where
    T: Clone + Sync,
    Tr: Fn(&[T]) -> Result<M> + Sync + Send,
    Sc: Fn(&M, &[T]) -> Result<f64> + Sync + Send,
{
    kfold_cv_with(items, k, seed, trainer, scorer, Execution::default())
}

pub fn kfold_cv_with<T, M, Tr, Sc>(
    items: &[T],
    k: usize,
    seed: u64,
    trainer: Tr,
    scorer: Sc,
    exec: Execution,
) -> Result<CvResult>
where
    T: Clone + Sync,
    Tr: Fn(&[T]) -> Result<M> + Sync + Send,
    Sc: Fn(&M, &[T]) -> Result<f64> + Sync + Send,
{
    let folds = kfold_indices(items.len(), k, seed)?;
    let outcomes = map_indices(k, exec, |f| {
        let held: Vec<T> = folds[f].iter().map(|&i| items[i].clone()).collect();
        let train: Vec<T> = folds
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, idx)| idx.iter().map(|&i| items[i].clone()))
            .collect();
        trainer(&train).and_then(|m| scorer(&m, &held))
    });
    let mut result = CvResult {
        scores: Vec::with_capacity(k),
        failed_folds: Vec::new(),
    };
    for (f, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(s) => result.scores.push(s),
            Err(e) => {
                log::warn!("cross-validation fold {f} failed, scored 0: {e}");
                result.scores.push(0.0);
                result.failed_folds.push(f);
            }
        }
    }
    Ok(result)
}

/// Population standard deviation (denominator k).
///
/// Mean and variance are computed exactly over the scores' shortest decimal
/// forms, so `[0.8, 0.9]` gives exactly `0.05`; only the final square root
/// rounds.
pub fn cv_std(scores: &[f64]) -> f64 {
    if scores.is_empty() || scores.iter().all(|&s| s == scores[0]) {
        return 0.0;
    }
    exact_population_variance(scores)
        .unwrap_or_else(|| float_population_variance(scores))
        .sqrt()
}

fn float_population_variance(scores: &[f64]) -> f64 {
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n
}

fn decimal_to_rational(v: f64) -> Option<BigRational> {
    if !v.is_finite() {
        return None;
    }
    let text = format!("{v:e}");
    let (mantissa, exp) = text.split_once('e')?;
    let exp: i32 = exp.parse().ok()?;
    let (int_part, frac_part) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    let digits: BigInt = format!("{int_part}{frac_part}").parse().ok()?;
    let scale = exp - frac_part.len() as i32;
    let ten = BigInt::from(10);
    Some(if scale >= 0 {
        BigRational::from_integer(digits * num_traits::pow(ten, scale as usize))
    } else {
        BigRational::new(digits, num_traits::pow(ten, (-scale) as usize))
    })
}

fn exact_population_variance(scores: &[f64]) -> Option<f64> {
    let values: Vec<BigRational> = scores.iter().map(|&s| decimal_to_rational(s)).collect::<Option<_>>()?;
    let n = BigRational::from_integer(BigInt::from(values.len()));
    let mean = values.iter().fold(BigRational::zero(), |acc, v| acc + v) / &n;
    let var = values
        .iter()
        .map(|v| {
            let d = v - &mean;
            &d * &d
        })
        .fold(BigRational::zero(), |acc, v| acc + v)
        / n;
    var.to_f64()
}

/// Exact-match fraction.
pub fn score_classification<L: PartialEq>(pred: &[L], truth: &[L]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::InvalidInput("cannot score zero predictions".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// R² per target, averaged uniformly. A constant-truth target scores 1 when
/// predicted exactly and 0 otherwise.
pub fn score_regression(pred: &Matrix, truth: &Matrix) -> Result<f64> {
    if truth.is_empty() || truth.cols() == 0 {
        return Err(Error::InvalidInput("cannot score zero predictions".into()));
    }
    if pred.rows() != truth.rows() || pred.cols() != truth.cols() {
        return Err(Error::InvalidInput(format!(
            "prediction shape {}x{} differs from truth {}x{}",
            pred.rows(),
            pred.cols(),
            truth.rows(),
            truth.cols()
        )));
    }
    let n = truth.rows() as f64;
    let mut total = 0.0;
    for j in 0..truth.cols() {
        let mean = (0..truth.rows()).map(|i| truth.get(i, j)).sum::<f64>() / n;
        let ss_tot: f64 = (0..truth.rows()).map(|i| (truth.get(i, j) - mean).powi(2)).sum();
        let ss_res: f64 = (0..truth.rows())
            .map(|i| (truth.get(i, j) - pred.get(i, j)).powi(2))
            .sum();
        total += if ss_tot == 0.0 {
            if ss_res == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            1.0 - ss_res / ss_tot
        };
    }
    Ok(total / truth.cols() as f64)
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub pipeline: PipelineParams,
    pub test_fraction: f64,
    pub cv_folds: usize,
    /// Per-nutrient fold-count overrides, stage one.
    pub stage1_folds: BTreeMap<Nutrient, usize>,
    /// Per-nutrient fold-count overrides, stage two.
    pub stage2_folds: BTreeMap<Nutrient, usize>,
    pub q_min: f64,
    /// Field for the first-model vs refined table; defaults to the first test record.
    pub probe_field: Option<String>,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            pipeline: PipelineParams::default(),
            test_fraction: 0.2,
            cv_folds: 10,
            stage1_folds: BTreeMap::new(),
            stage2_folds: BTreeMap::new(),
            q_min: pipeline::DEFAULT_Q_MIN,
            probe_field: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub nutrient: Nutrient,
    pub predicted_max_application: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub cv_folds: usize,
    pub cv_mean: f64,
    pub cv_std: f64,
}

impl ReportRow {
    fn zero(nutrient: Nutrient) -> Self {
        Self {
            nutrient,
            predicted_max_application: 0,
            train_accuracy: 0.0,
            test_accuracy: 0.0,
            cv_folds: 0,
            cv_mean: 0.0,
            cv_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountComparison {
    pub nutrient: Nutrient,
    pub first_model: usize,
    pub refined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stage1: Vec<ReportRow>,
    pub stage2: Vec<ReportRow>,
    pub probe_field: String,
    pub table3: Vec<CountComparison>,
    pub n_train: usize,
    pub n_test: usize,
}

pub const REPORT_COLUMNS: [&str; 7] = [
    "nutrient",
    "predicted_max_application",
    "train_accuracy",
    "test_accuracy",
    "cv_folds",
    "cv_mean",
    "cv_std",
];

pub const TABLE3_COLUMNS: [&str; 4] = ["no", "nutrient", "first_model_prediction", "refined_outcome"];

fn fmt_score(v: f64) -> String {
    format!("{v:.4}")
}

fn row_cells(r: &ReportRow) -> Vec<String> {
    vec![
        r.nutrient.name().to_string(),
        r.predicted_max_application.to_string(),
        fmt_score(r.train_accuracy),
        fmt_score(r.test_accuracy),
        r.cv_folds.to_string(),
        fmt_score(r.cv_mean),
        fmt_score(r.cv_std),
    ]
}

fn table3_cells(report: &EvalReport) -> Vec<Vec<String>> {
    report
        .table3
        .iter()
        .enumerate()
        .map(|(i, c)| {
            vec![
                (i + 1).to_string(),
                c.nutrient.name().to_string(),
                c.first_model.to_string(),
                c.refined.to_string(),
            ]
        })
        .collect()
}

fn csv_text(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

fn aligned(title: &str, header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = format!("{title}\n");
    let head = line(header.to_vec());
    let _ = writeln!(out, "{head}");
    let _ = writeln!(out, "{}", "-".repeat(head.len()));
    for r in rows {
        let _ = writeln!(out, "{}", line(r.iter().map(String::as_str).collect()));
    }
    out
}

impl EvalReport {
    pub fn table1_csv(&self) -> String {
        csv_text(&REPORT_COLUMNS, &self.stage1.iter().map(row_cells).collect::<Vec<_>>())
    }

    pub fn table2_csv(&self) -> String {
        csv_text(&REPORT_COLUMNS, &self.stage2.iter().map(row_cells).collect::<Vec<_>>())
    }

    pub fn table3_csv(&self) -> String {
        csv_text(&TABLE3_COLUMNS, &table3_cells(self))
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&aligned(
            "Stage 1: application count accuracy (exact match)",
            &REPORT_COLUMNS,
            &self.stage1.iter().map(row_cells).collect::<Vec<_>>(),
        ));
        out.push('\n');
        out.push_str(&aligned(
            "Stage 2: application timeline accuracy (R^2 averaged uniformly over targets)",
            &REPORT_COLUMNS,
            &self.stage2.iter().map(row_cells).collect::<Vec<_>>(),
        ));
        out.push('\n');
        out.push_str(&aligned(
            &format!("First model vs refined application counts, field `{}`", self.probe_field),
            &TABLE3_COLUMNS,
            &table3_cells(self),
        ));
        out
    }
}

fn folds_for(overrides: &BTreeMap<Nutrient, usize>, default: usize, nutrient: Nutrient) -> usize {
    overrides.get(&nutrient).copied().unwrap_or(default)
}

/// Stage-one cross-validation for one nutrient over `records`.
fn stage1_cv(
    records: &[FieldSeasonRecord],
    nutrient: Nutrient,
    folds: usize,
    params: &PipelineParams,
    seed: u64,
) -> Result<CvResult> {
    kfold_cv_with(
        records,
        folds,
        seed,
        |train| pipeline::train_classifier(train, nutrient, Mode::Reproduction, params),
        |model, held| model.accuracy(held),
        Execution::Sequential,
    )
}

fn stage2_cv(
    records: &[FieldSeasonRecord],
    nutrient: Nutrient,
    folds: usize,
    params: &PipelineParams,
    seed: u64,
) -> Result<CvResult> {
    kfold_cv_with(
        records,
        folds,
        seed,
        |train| pipeline::train_regressors(train, nutrient, Mode::Reproduction, params),
        |models, held| {
            models
                .accuracy(held)?
                .ok_or_else(|| Error::InsufficientData(format!("no held-out {nutrient} rows with a trained count")))
        },
        Execution::Sequential,
    )
}

/// Trains both stages in reproduction mode on a seeded split and fills the
/// accuracy tables. Nutrients without a stage-two model get a zero row.
pub fn build_report(records: &[FieldSeasonRecord], params: &EvalParams) -> Result<EvalReport> {
    build_report_with(records, params, Execution::default())
}

pub fn build_report_with(records: &[FieldSeasonRecord], params: &EvalParams, exec: Execution) -> Result<EvalReport> {
    let seed = params.pipeline.forest.seed;
    let (train, test) = split(records, params.test_fraction, derive_seed(seed, 0x5EED))?;
    let p = &params.pipeline;
    let stage1 = pipeline::train_stage1_with(&train, Mode::Reproduction, p, exec)?;
    let stage2 = pipeline::train_stage2_with(&train, Mode::Reproduction, p, exec)?;

    let rows = map_indices(Nutrient::ALL.len(), exec, |i| -> Result<(ReportRow, ReportRow)> {
        let nutrient = Nutrient::ALL[i];
        let cv_seed = derive_seed_path(seed, &[0xC5, i as u64]);

        let clf = stage1.classifier(nutrient);
        let preds = if test.is_empty() { Vec::new() } else { clf.predict(&test)? };
        let k1 = folds_for(&params.stage1_folds, params.cv_folds, nutrient);
        let cv1 = stage1_cv(&train, nutrient, k1, p, cv_seed)?;
        let row1 = ReportRow {
            nutrient,
            predicted_max_application: preds.iter().copied().max().unwrap_or(0),
            train_accuracy: clf.accuracy(&train)?,
            test_accuracy: if test.is_empty() { 0.0 } else { clf.accuracy(&test)? },
            cv_folds: k1,
            cv_mean: cv1.mean(),
            cv_std: cv1.std(),
        };

        let regs = stage2.regressors(nutrient);
        let row2 = match regs.max_count() {
            None => ReportRow::zero(nutrient),
            Some(max_k) => {
                let k2 = folds_for(&params.stage2_folds, params.cv_folds, nutrient);
                let cv2 = stage2_cv(&train, nutrient, k2, p, derive_seed(cv_seed, 2))?;
                ReportRow {
                    nutrient,
                    predicted_max_application: max_k,
                    train_accuracy: regs.accuracy(&train)?.unwrap_or(0.0),
                    test_accuracy: regs.accuracy(&test)?.unwrap_or(0.0),
                    cv_folds: k2,
                    cv_mean: cv2.mean(),
                    cv_std: cv2.std(),
                }
            }
        };
        Ok((row1, row2))
    });
    let mut stage1_rows = Vec::new();
    let mut stage2_rows = Vec::new();
    for r in rows {
        let (a, b) = r?;
        stage1_rows.push(a);
        stage2_rows.push(b);
    }

    let probe = match &params.probe_field {
        Some(id) => records
            .iter()
            .find(|r| &r.field_id == id)
            .ok_or_else(|| Error::InvalidInput(format!("probe field `{id}` not found")))?,
        None => test.first().unwrap_or(&train[0]),
    };
    let rec = pipeline::recommend(&stage1, &stage2, probe, params.q_min)?;
    let table3 = rec
        .nutrients
        .iter()
        .map(|n| CountComparison {
            nutrient: n.nutrient,
            first_model: n.raw_count,
            refined: n.refined_count,
        })
        .collect();

    Ok(EvalReport {
        stage1: stage1_rows,
        stage2: stage2_rows,
        probe_field: probe.field_id.clone(),
        table3,
        n_train: train.len(),
        n_test: test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_partition() {
        let items: Vec<usize> = (0..10).collect();
        let (tr, te) = split(&items, 0.2, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        let (tr2, te2) = split(&items, 0.2, 3).unwrap();
        assert_eq!((&tr, &te), (&tr2, &te2));
        let mut all: Vec<usize> = tr.into_iter().chain(te).collect();
        all.sort();
        assert_eq!(all, items);
        assert!(split(&[1], 0.5, 0).is_err());
        assert!(split(&items, 1.0, 0).is_err());
        assert!(split(&items, 0.0, 0).is_err());
    }

    #[test]
    fn fold_sizes_103_by_10() {
        let folds = kfold_indices(103, 10, 1).unwrap();
        let mut sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        sizes.sort();
        assert_eq!(sizes, [10, 10, 10, 10, 10, 10, 10, 11, 11, 11]);
        let mut all: Vec<usize> = folds.concat();
        all.sort();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert!(kfold_indices(5, 10, 0).is_err());
        assert!(kfold_indices(5, 1, 0).is_err());
    }

    #[test]
    fn cv_std_examples() {
        assert_eq!(cv_std(&[0.8, 0.9]), 0.05);
        assert_eq!(cv_std(&[0.7, 0.7, 0.7]), 0.0);
        assert_eq!(cv_std(&[0.3]), 0.0);
        assert!((cv_std(&[1.0, 2.0, 3.0, 4.0]) - 1.25f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn leave_one_out_majority_on_constant_labels() {
        let items = vec![4u32; 6];
        let cv = kfold_cv(
            &items,
            6,
            0,
            |train: &[u32]| Ok(train[0]),
            |m: &u32, held: &[u32]| score_classification(&vec![*m; held.len()], held),
        )
        .unwrap();
        assert_eq!(cv.scores, vec![1.0; 6]);
        assert!(cv.failed_folds.is_empty());
    }

    #[test]
    fn failing_fold_scores_zero() {
        let items: Vec<u32> = (0..4).collect();
        let cv = kfold_cv(
            &items,
            2,
            0,
            |train: &[u32]| {
                if train.contains(&0) {
                    Err(Error::InvalidInput("boom".into()))
                } else {
                    Ok(())
                }
            },
            |_, _| Ok(1.0),
        )
        .unwrap();
        assert_eq!(cv.failed_folds.len(), 1);
        assert_eq!(cv.mean(), 0.5);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(score_classification(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(score_classification(&[0, 0], &[1, 2]).unwrap(), 0.0);
        assert!(score_classification::<u32>(&[], &[]).is_err());

        let truth = Matrix::from_rows(&[[1.0, 10.0], [3.0, 30.0]]).unwrap();
        assert_eq!(score_regression(&truth, &truth).unwrap(), 1.0);
        let mean = Matrix::from_rows(&[[2.0, 20.0], [2.0, 20.0]]).unwrap();
        assert_eq!(score_regression(&mean, &truth).unwrap(), 0.0);

        let constant = Matrix::from_rows(&[[5.0], [5.0]]).unwrap();
        assert_eq!(score_regression(&constant, &constant).unwrap(), 1.0);
        let off = Matrix::from_rows(&[[5.0], [5.5]]).unwrap();
        assert_eq!(score_regression(&off, &constant).unwrap(), 0.0);
    }
}
