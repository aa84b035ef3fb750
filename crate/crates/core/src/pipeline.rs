//! The two-stage system.
//!
//! Stage one: one forest classifier per nutrient predicts the season's
//! application count (0..=cap). Stage two: for every (nutrient, count k) with
//! enough training fields, a multi-output forest regresses
//! `[qty_1..qty_k, day_1..day_k, total_qty, yield]`. Recommendation chains the
//! two and refines the stage-two output, dropping applications below `q_min`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureSpec, FieldSeasonRecord, Nutrient, NutrientTimeline, TimelineEntry, MAX_DAY, MIN_DAY};
use crate::error::{Error, Result};
use crate::eval::{score_classification, score_regression};
use crate::forest::{ForestModel, ForestParams, ForestTargets};
use crate::matrix::Matrix;
use crate::par::{map_indices, Execution};
use crate::rng::derive_seed_path;

pub const DEFAULT_CAP: usize = 7;
pub const DEFAULT_MIN_SUBSET: usize = 20;
pub const DEFAULT_Q_MIN: f64 = 5.0;
pub const MIN_STAGE1_RECORDS: usize = 10;
pub const MODEL_VERSION: &str = "agritime-model/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Weather, soil and field features only; usable before anything is applied.
    Recommendation,
    /// Also uses the observed season totals of the other nutrients.
    Reproduction,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Recommendation => "recommendation",
            Mode::Reproduction => "reproduction",
        }
    }

    fn feature_spec(self, records: &[FieldSeasonRecord], nutrient: Nutrient) -> FeatureSpec {
        let co = (self == Mode::Reproduction).then_some(nutrient);
        FeatureSpec::from_records(records, co)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "recommendation" => Ok(Mode::Recommendation),
            "reproduction" => Ok(Mode::Reproduction),
            _ => Err(Error::InvalidInput(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub forest: ForestParams,
    /// Largest application count stage one predicts.
    pub cap: usize,
    /// Fewest usable fields for a (nutrient, k) stage-two model.
    pub min_subset: usize,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            forest: ForestParams::default(),
            cap: DEFAULT_CAP,
            min_subset: DEFAULT_MIN_SUBSET,
        }
    }
}

// ---------------------------------------------------------------------------
// Stage one

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NutrientClassifier {
    pub nutrient: Nutrient,
    pub cap: usize,
    pub spec: FeatureSpec,
    pub model: ForestModel,
}

impl NutrientClassifier {
    pub fn predict_one(&self, record: &FieldSeasonRecord) -> Result<usize> {
        let row = self.spec.encode_row(record)?;
        Ok((self.model.predict_class(&row)? as usize).min(self.cap))
    }

    pub fn predict(&self, records: &[FieldSeasonRecord]) -> Result<Vec<usize>> {
        records.iter().map(|r| self.predict_one(r)).collect()
    }

    /// Exact-match accuracy against the observed (capped) counts.
    pub fn accuracy(&self, records: &[FieldSeasonRecord]) -> Result<f64> {
        let pred = self.predict(records)?;
        let truth: Vec<usize> = records.iter().map(|r| r.count(self.nutrient).min(self.cap)).collect();
        score_classification(&pred, &truth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneModel {
    pub mode: Mode,
    pub cap: usize,
    pub classifiers: BTreeMap<Nutrient, NutrientClassifier>,
}

impl StageOneModel {
    pub fn classifier(&self, nutrient: Nutrient) -> &NutrientClassifier {
        &self.classifiers[&nutrient]
    }

    /// Predicted count per nutrient, in fixed nutrient order.
    pub fn predict_counts(&self, record: &FieldSeasonRecord) -> Result<Vec<(Nutrient, usize)>> {
        Nutrient::ALL
            .into_iter()
            .map(|n| Ok((n, self.classifier(n).predict_one(record)?)))
            .collect()
    }
}

/// Stage-one classifier for a single nutrient. Labels are merged-timeline
/// counts clamped to `params.cap`.
pub fn train_classifier(
    records: &[FieldSeasonRecord],
    nutrient: Nutrient,
    mode: Mode,
    params: &PipelineParams,
) -> Result<NutrientClassifier> {
    train_classifier_with(records, nutrient, mode, params, Execution::default())
}

fn train_classifier_with(
    records: &[FieldSeasonRecord],
    nutrient: Nutrient,
    mode: Mode,
    params: &PipelineParams,
    exec: Execution,
) -> Result<NutrientClassifier> {
    let spec = mode.feature_spec(records, nutrient);
    let rows = records
        .iter()
        .map(|r| spec.encode_row(r))
        .collect::<Result<Vec<_>>>()?;
    let x = Matrix::from_rows(&rows)?;
    let labels: Vec<u32> = records
        .iter()
        .map(|r| r.count(nutrient).min(params.cap) as u32)
        .collect();
    let forest = params
        .forest
        .with_seed(derive_seed_path(params.forest.seed, &[1, nutrient.index() as u64]));
    let model = ForestModel::fit_with(&x, ForestTargets::Labels(&labels), &forest, exec)?
        .with_names(spec.columns().0, vec![format!("{}_count", nutrient.symbol())]);
    if model.degenerate {
        log::info!("stage 1 {nutrient}: single class {}, constant predictor", model.classes[0]);
    }
    Ok(NutrientClassifier {
        nutrient,
        cap: params.cap,
        spec,
        model,
    })
}

pub fn train_stage1(records: &[FieldSeasonRecord], mode: Mode, params: &PipelineParams) -> Result<StageOneModel> {
    train_stage1_with(records, mode, params, Execution::default())
}

pub fn train_stage1_with(
    records: &[FieldSeasonRecord],
    mode: Mode,
    params: &PipelineParams,
    exec: Execution,
) -> Result<StageOneModel> {
    if records.len() < MIN_STAGE1_RECORDS {
        return Err(Error::InsufficientData(format!(
            "stage 1 needs at least {MIN_STAGE1_RECORDS} records, got {}",
            records.len()
        )));
    }
    let models = map_indices(Nutrient::ALL.len(), exec, |i| {
        train_classifier_with(records, Nutrient::ALL[i], mode, params, exec)
    });
    let mut classifiers = BTreeMap::new();
    for m in models {
        let m = m?;
        classifiers.insert(m.nutrient, m);
    }
    Ok(StageOneModel {
        mode,
        cap: params.cap,
        classifiers,
    })
}

// ---------------------------------------------------------------------------
// Stage two

/// `[qty_1..qty_k, day_1..day_k, total_qty, yield]` for a merged timeline.
pub fn stage2_targets(timeline: &NutrientTimeline, yield_t_ha: f64) -> Vec<f64> {
    let mut t: Vec<f64> = timeline.entries.iter().map(|e| e.qty_kg_ha).collect();
    t.extend(timeline.entries.iter().map(|e| e.day as f64));
    t.push(timeline.total_qty_kg_ha);
    t.push(yield_t_ha);
    t
}

/// Inverse of [`stage2_targets`] for a `k`-application vector. Days are rounded.
pub fn timeline_from_targets(nutrient: Nutrient, targets: &[f64], k: usize) -> Result<NutrientTimeline> {
    if targets.len() != 2 * k + 2 {
        return Err(Error::InvalidInput(format!(
            "a {k}-application target vector has {} values, got {}",
            2 * k + 2,
            targets.len()
        )));
    }
    Ok(NutrientTimeline {
        nutrient,
        entries: (0..k)
            .map(|i| TimelineEntry {
                day: targets[k + i].round() as i32,
                qty_kg_ha: targets[i],
            })
            .collect(),
        total_qty_kg_ha: targets[2 * k],
        expected_yield_t_ha: Some(targets[2 * k + 1]),
    })
}

pub fn stage2_target_names(nutrient: Nutrient, k: usize) -> Vec<String> {
    let s = nutrient.symbol();
    let mut names: Vec<String> = (1..=k).map(|i| format!("{s}_qty_{i}")).collect();
    names.extend((1..=k).map(|i| format!("{s}_day_{i}")));
    names.push(format!("{s}_total_qty"));
    names.push("total_yield".to_string());
    names
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NutrientRegressors {
    pub nutrient: Nutrient,
    pub spec: FeatureSpec,
    /// Keyed by application count k.
    pub by_count: BTreeMap<usize, ForestModel>,
}

impl NutrientRegressors {
    pub fn max_count(&self) -> Option<usize> {
        self.by_count.keys().next_back().copied()
    }

    pub fn predict(&self, record: &FieldSeasonRecord, k: usize) -> Result<Option<Vec<f64>>> {
        let Some(model) = self.by_count.get(&k) else {
            return Ok(None);
        };
        let row = self.spec.encode_row(record)?;
        model.predict_values(&row).map(Some)
    }

    /// Row-weighted mean R² over the counts that have a model and at least
    /// one usable record (observed count k, yield present). `None` if no record
    /// qualifies.
    pub fn accuracy(&self, records: &[FieldSeasonRecord]) -> Result<Option<f64>> {
        let mut weighted = 0.0;
        let mut rows = 0usize;
        for (&k, model) in &self.by_count {
            let (x, y) = match stage2_design(records, self.nutrient, k, &self.spec)? {
                Some(d) => d,
                None => continue,
            };
            let pred = model.predict_matrix(&x)?;
            weighted += score_regression(&pred, &y)? * x.rows() as f64;
            rows += x.rows();
        }
        Ok((rows > 0).then(|| weighted / rows as f64))
    }
}

/// Feature and target matrices for the (nutrient, k) subset with observed yield.
pub fn stage2_design(
    records: &[FieldSeasonRecord],
    nutrient: Nutrient,
    k: usize,
    spec: &FeatureSpec,
) -> Result<Option<(Matrix, Matrix)>> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for r in records {
        let t = r.timeline(nutrient);
        if t.count() != k {
            continue;
        }
        let Some(y) = r.yield_t_ha else { continue };
        xs.push(spec.encode_row(r)?);
        ys.push(stage2_targets(&t, y));
    }
    if xs.is_empty() {
        return Ok(None);
    }
    Ok(Some((Matrix::from_rows(&xs)?, Matrix::from_rows(&ys)?)))
}

fn fit_regressors(
    records: &[FieldSeasonRecord],
    nutrient: Nutrient,
    mode: Mode,
    params: &PipelineParams,
    exec: Execution,
) -> Result<NutrientRegressors> {
    let spec = mode.feature_spec(records, nutrient);
    let mut by_count = BTreeMap::new();
    for k in 1..=params.cap {
        let Some((x, y)) = stage2_design(records, nutrient, k, &spec)? else {
            continue;
        };
        if x.rows() < params.min_subset {
            log::info!(
                "stage 2 {nutrient} k={k}: {} usable records < {}, skipped",
                x.rows(),
                params.min_subset
            );
            continue;
        }
        let forest = params
            .forest
            .with_seed(derive_seed_path(params.forest.seed, &[2, nutrient.index() as u64, k as u64]));
        let model = ForestModel::fit_with(&x, ForestTargets::Values(&y), &forest, exec)?
            .with_names(spec.columns().0, stage2_target_names(nutrient, k));
        by_count.insert(k, model);
    }
    Ok(NutrientRegressors {
        nutrient,
        spec,
        by_count,
    })
}

/// Stage-two regressors for one nutrient; fails if no count reaches `min_subset`.
pub fn train_regressors(
    records: &[FieldSeasonRecord],
    nutrient: Nutrient,
    mode: Mode,
    params: &PipelineParams,
) -> Result<NutrientRegressors> {
    let r = fit_regressors(records, nutrient, mode, params, Execution::default())?;
    if r.by_count.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no {nutrient} application count has {} usable records",
            params.min_subset
        )));
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTwoModel {
    pub mode: Mode,
    pub min_subset: usize,
    pub regressors: BTreeMap<Nutrient, NutrientRegressors>,
}

impl StageTwoModel {
    pub fn regressors(&self, nutrient: Nutrient) -> &NutrientRegressors {
        &self.regressors[&nutrient]
    }

    pub fn n_models(&self) -> usize {
        self.regressors.values().map(|r| r.by_count.len()).sum()
    }
}

pub fn train_stage2(records: &[FieldSeasonRecord], mode: Mode, params: &PipelineParams) -> Result<StageTwoModel> {
    train_stage2_with(records, mode, params, Execution::default())
}

pub fn train_stage2_with(
    records: &[FieldSeasonRecord],
    mode: Mode,
    params: &PipelineParams,
    exec: Execution,
) -> Result<StageTwoModel> {
    if records.len() < MIN_STAGE1_RECORDS {
        return Err(Error::InsufficientData(format!(
            "stage 2 needs at least {MIN_STAGE1_RECORDS} records, got {}",
            records.len()
        )));
    }
    let fitted = map_indices(Nutrient::ALL.len(), exec, |i| {
        fit_regressors(records, Nutrient::ALL[i], mode, params, exec)
    });
    let mut regressors = BTreeMap::new();
    for r in fitted {
        let r = r?;
        regressors.insert(r.nutrient, r);
    }
    let model = StageTwoModel {
        mode,
        min_subset: params.min_subset,
        regressors,
    };
    if model.n_models() == 0 {
        return Err(Error::InsufficientStageTwo {
            min_subset: params.min_subset,
        });
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Recommendation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NutrientRecommendation {
    pub nutrient: Nutrient,
    pub raw_count: usize,
    pub refined_count: usize,
    pub timeline: NutrientTimeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub field_id: String,
    pub mode: Mode,
    pub nutrients: Vec<NutrientRecommendation>,
    /// Mean stage-two yield over nutrients with at least one application.
    pub expected_yield_t_ha: Option<f64>,
}

impl Recommendation {
    pub fn nutrient(&self, n: Nutrient) -> &NutrientRecommendation {
        &self.nutrients[n.index()]
    }
}

/// Turns a raw stage-two vector for `k` applications into a timeline:
/// quantities clamped at 0, entries below `q_min` dropped, days rounded and
/// clamped to the season window, sorted, same-day entries merged.
pub fn refine(nutrient: Nutrient, output: &[f64], k: usize, q_min: f64) -> Result<NutrientTimeline> {
    let raw = timeline_from_targets(nutrient, output, k)?;
    let kept = (0..k).filter_map(|i| {
        let qty = output[i].max(0.0);
        let day = output[k + i].round().clamp(MIN_DAY as f64, MAX_DAY as f64) as i32;
        (qty >= q_min).then_some((day, qty))
    });
    let mut t = NutrientTimeline::from_events(nutrient, kept);
    if t.entries.is_empty() {
        return Ok(NutrientTimeline::empty(nutrient));
    }
    t.total_qty_kg_ha = raw.total_qty_kg_ha.max(0.0);
    t.expected_yield_t_ha = raw.expected_yield_t_ha;
    Ok(t)
}

pub fn recommend(
    stage1: &StageOneModel,
    stage2: &StageTwoModel,
    record: &FieldSeasonRecord,
    q_min: f64,
) -> Result<Recommendation> {
    if stage1.mode != stage2.mode {
        return Err(Error::ModeMismatch {
            model: stage1.mode.to_string(),
            requested: stage2.mode.to_string(),
        });
    }
    let mut nutrients = Vec::with_capacity(Nutrient::ALL.len());
    for nutrient in Nutrient::ALL {
        let raw_count = stage1.classifier(nutrient).predict_one(record)?;
        let output = if raw_count == 0 {
            None
        } else {
            stage2
                .regressors
                .get(&nutrient)
                .map(|r| r.predict(record, raw_count))
                .transpose()?
                .flatten()
        };
        let timeline = match output {
            Some(out) => refine(nutrient, &out, raw_count, q_min)?,
            None => NutrientTimeline::empty(nutrient),
        };
        nutrients.push(NutrientRecommendation {
            nutrient,
            raw_count,
            refined_count: timeline.count(),
            timeline,
        });
    }
    let yields: Vec<f64> = nutrients
        .iter()
        .filter(|n| n.refined_count > 0)
        .filter_map(|n| n.timeline.expected_yield_t_ha)
        .collect();
    Ok(Recommendation {
        field_id: record.field_id.clone(),
        mode: stage1.mode,
        nutrients,
        expected_yield_t_ha: (!yields.is_empty()).then(|| yields.iter().sum::<f64>() / yields.len() as f64),
    })
}

// ---------------------------------------------------------------------------
// Persistence

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub version: String,
    pub mode: Mode,
    pub params: PipelineParams,
    pub stage1: StageOneModel,
    pub stage2: StageTwoModel,
}

impl ModelBundle {
    pub fn new(stage1: StageOneModel, stage2: StageTwoModel, params: PipelineParams) -> Result<Self> {
        if stage1.mode != stage2.mode {
            return Err(Error::ModeMismatch {
                model: stage1.mode.to_string(),
                requested: stage2.mode.to_string(),
            });
        }
        Ok(Self {
            version: MODEL_VERSION.to_string(),
            mode: stage1.mode,
            params,
            stage1,
            stage2,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses a model document, checking the version tag before the schema.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("version").and_then(|v| v.as_str()) {
            Some(MODEL_VERSION) => {}
            Some(other) => {
                return Err(Error::Version {
                    found: other.to_string(),
                    expected: MODEL_VERSION.to_string(),
                })
            }
            None => {
                return Err(Error::Schema {
                    path: "version".into(),
                    message: "missing version tag".into(),
                })
            }
        }
        let bundle: ModelBundle = serde_path_to_error::deserialize(value).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        if bundle.stage1.mode != bundle.mode || bundle.stage2.mode != bundle.mode {
            return Err(Error::Schema {
                path: "mode".into(),
                message: "stage modes disagree with the bundle mode".into(),
            });
        }
        Ok(bundle)
    }
}

pub fn save_models(bundle: &ModelBundle, path: &Path) -> Result<()> {
    std::fs::write(path, bundle.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn load_models(path: &Path) -> Result<ModelBundle> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ModelBundle::from_json(&text)
}
