//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed.
//!
//! Run with `cargo test --release -p agritime-cli --test acceptance`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use agritime::dataset::{FieldSeasonRecord, Nutrient, MAX_DAY, MIN_DAY};
use agritime::eval::{build_report, cv_std, kfold_indices, split, EvalParams};
use agritime::pipeline::{
    load_models, recommend, save_models, train_classifier, train_stage1, train_stage2, ModelBundle, Mode,
    PipelineParams, StageOneModel, StageTwoModel,
};
use agritime::synth::{generate, Drivers, SynthConfig, SynthData};
use agritime::tree::{best_split, gini_impurity, midpoint, mt_sse, Targets};
use agritime::Matrix;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Exact split oracle

fn rat(v: i64) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

enum OracleTargets {
    Classes { labels: Vec<usize>, n_classes: usize },
    Values(Vec<Vec<i64>>),
}

/// Per-sample impurity of a multiset of rows, in exact arithmetic.
fn exact_impurity(t: &OracleTargets, rows: &[usize]) -> BigRational {
    let n = rat(rows.len() as i64);
    match t {
        OracleTargets::Classes { labels, n_classes } => {
            let mut counts = vec![0i64; *n_classes];
            for &r in rows {
                counts[labels[r]] += 1;
            }
            let mut g = BigRational::one();
            for c in counts {
                let p = rat(c) / &n;
                g -= &p * &p;
            }
            g
        }
        OracleTargets::Values(y) => {
            let mut sse = BigRational::zero();
            let m = y[0].len();
            let mut sums = vec![0i64; m];
            for &r in rows {
                for (s, v) in sums.iter_mut().zip(&y[r]) {
                    *s += v;
                }
            }
            let means: Vec<BigRational> = sums.into_iter().map(|s| rat(s) / &n).collect();
            for &r in rows {
                for (v, mean) in y[r].iter().zip(&means) {
                    let d = rat(*v) - mean;
                    sse += &d * &d;
                }
            }
            sse / n
        }
    }
}

struct OracleSplit {
    feature: usize,
    threshold: f64,
    decrease: BigRational,
}

/// Every (feature, midpoint) pair scored exactly; first strict maximum wins.
fn brute_force_split(
    x: &[Vec<i64>],
    t: &OracleTargets,
    rows: &[usize],
    features: &[usize],
    min_leaf: usize,
) -> Option<OracleSplit> {
    let n = rows.len();
    if n < 2 {
        return None;
    }
    let parent = exact_impurity(t, rows);
    let mut feats = features.to_vec();
    feats.sort();
    feats.dedup();
    let mut best: Option<OracleSplit> = None;
    for &f in &feats {
        let mut values: Vec<i64> = rows.iter().map(|&r| x[r][f]).collect();
        values.sort();
        values.dedup();
        for w in values.windows(2) {
            let threshold = (w[0] as f64 + w[1] as f64) / 2.0;
            let left: Vec<usize> = rows.iter().copied().filter(|&r| (x[r][f] as f64) <= threshold).collect();
            let right: Vec<usize> = rows.iter().copied().filter(|&r| (x[r][f] as f64) > threshold).collect();
            if left.len() < min_leaf || right.len() < min_leaf {
                continue;
            }
            let nl = rat(left.len() as i64) / rat(n as i64);
            let nr = rat(right.len() as i64) / rat(n as i64);
            let decrease = &parent - nl * exact_impurity(t, &left) - nr * exact_impurity(t, &right);
            if best.as_ref().is_none_or(|b| decrease > b.decrease) {
                best = Some(OracleSplit {
                    feature: f,
                    threshold,
                    decrease,
                });
            }
        }
    }
    best.filter(|b| b.decrease.is_positive())
}

struct Instance {
    x: Vec<Vec<i64>>,
    targets: OracleTargets,
    rows: Vec<usize>,
    features: Vec<usize>,
    min_leaf: usize,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.random_range(2..=30);
    let p = rng.random_range(1..=4);
    let levels = rng.random_range(1..=7);
    let x: Vec<Vec<i64>> = (0..n).map(|_| (0..p).map(|_| rng.random_range(0..levels)).collect()).collect();
    let targets = if rng.random_bool(0.5) {
        let n_classes = rng.random_range(2..=4);
        OracleTargets::Classes {
            labels: (0..n).map(|_| rng.random_range(0..n_classes)).collect(),
            n_classes,
        }
    } else {
        let m = rng.random_range(1..=3);
        OracleTargets::Values((0..n).map(|_| (0..m).map(|_| rng.random_range(-5..=5)).collect()).collect())
    };
    let rows: Vec<usize> = if rng.random_bool(0.5) {
        (0..n).collect()
    } else {
        (0..n).map(|_| rng.random_range(0..n)).collect()
    };
    let mut features: Vec<usize> = (0..p).collect();
    features.shuffle(rng);
    features.truncate(rng.random_range(1..=p));
    Instance {
        x,
        targets,
        rows,
        features,
        min_leaf: rng.random_range(1..=3),
    }
}

fn float_x(inst: &Instance) -> Matrix {
    Matrix::from_rows(&inst.x.iter().map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>()).collect::<Vec<_>>())
        .unwrap()
}

enum FloatTargets {
    Classes(Vec<usize>, usize),
    Values(Matrix),
}

impl FloatTargets {
    fn of(t: &OracleTargets) -> Self {
        match t {
            OracleTargets::Classes { labels, n_classes } => FloatTargets::Classes(labels.clone(), *n_classes),
            OracleTargets::Values(y) => FloatTargets::Values(
                Matrix::from_rows(&y.iter().map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>()).collect::<Vec<_>>())
                    .unwrap(),
            ),
        }
    }

    fn view(&self) -> Targets<'_> {
        match self {
            FloatTargets::Classes(labels, n_classes) => Targets::Classes {
                labels,
                n_classes: *n_classes,
            },
            FloatTargets::Values(m) => Targets::Values(m),
        }
    }
}

fn ac01_split_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xAC01);
    let mut with_split = 0;
    for trial in 0..1000 {
        let inst = random_instance(&mut rng);
        let x = float_x(&inst);
        let ft = FloatTargets::of(&inst.targets);
        let got = best_split(&x, ft.view(), &inst.rows, &inst.features, inst.min_leaf);
        let want = brute_force_split(&inst.x, &inst.targets, &inst.rows, &inst.features, inst.min_leaf);
        match (got, want) {
            (None, None) => {}
            (Some(g), Some(w)) => {
                with_split += 1;
                check(g.feature == w.feature && g.threshold == w.threshold, || {
                    format!(
                        "trial {trial}: got (f{}, {}), oracle (f{}, {})",
                        g.feature, g.threshold, w.feature, w.threshold
                    )
                })?;
                let wd = w.decrease.to_f64().unwrap();
                check((g.impurity_decrease - wd).abs() <= 1e-9 * wd.abs().max(1.0), || {
                    format!("trial {trial}: decrease {} vs oracle {wd}", g.impurity_decrease)
                })?;
            }
            (g, w) => {
                return Err(format!(
                    "trial {trial}: split presence differs (got {}, oracle {})",
                    g.is_some(),
                    w.is_some()
                ))
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!("1000 instances, {with_split} with a split, exact match, {secs:.2}s"))
}

// ---------------------------------------------------------------------------
// Impurity identities

fn exact(v: f64) -> BigRational {
    BigRational::from_float(v).unwrap()
}

fn ac02_impurity_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xAC02);

    // SSE against n * population variance, both sides from exact rationals.
    let mut worst_rel = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=50);
        let m = rng.random_range(1..=4);
        let scale = 10f64.powi(rng.random_range(-3..=4));
        let offset = rng.random_range(-1000.0..1000.0);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| offset + scale * rng.random_range(-1.0..1.0)).collect())
            .collect();
        let y = Matrix::from_rows(&rows).unwrap();
        let got = mt_sse(&y).unwrap();
        let mut want = BigRational::zero();
        for j in 0..m {
            let col: Vec<BigRational> = rows.iter().map(|r| exact(r[j])).collect();
            let nn = rat(n as i64);
            let mean = col.iter().fold(BigRational::zero(), |a, b| a + b) / &nn;
            let var = col.iter().map(|v| (v - &mean) * (v - &mean)).fold(BigRational::zero(), |a, b| a + b) / &nn;
            want += nn * var;
        }
        let want = want.to_f64().unwrap();
        let rel = if want == 0.0 { got.abs() } else { ((got - want) / want).abs() };
        worst_rel = worst_rel.max(rel);
        check(rel <= 1e-9, || format!("mt_sse {got} vs {want}, rel {rel:e}"))?;
    }

    for _ in 0..2000 {
        let c = rng.random_range(1..=8usize);
        let n = rng.random_range(1..=60);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let g = gini_impurity(&labels).unwrap();
        let hi = 1.0 - 1.0 / c as f64;
        check((0.0..=hi + 1e-12).contains(&g), || format!("gini {g} outside [0, {hi}] for C = {c}"))?;
    }

    // Weighted child impurity against the parent at accepted and at arbitrary splits.
    let mut accepted = 0;
    for trial in 0..10_000 {
        let inst = random_instance(&mut rng);
        let x = float_x(&inst);
        let ft = FloatTargets::of(&inst.targets);
        let impurity = |rows: &[usize]| -> f64 {
            match &ft {
                FloatTargets::Classes(labels, _) => {
                    gini_impurity(&rows.iter().map(|&r| labels[r]).collect::<Vec<_>>()).unwrap()
                }
                FloatTargets::Values(y) => mt_sse(&y.select_rows(rows)).unwrap() / rows.len() as f64,
            }
        };
        let parent = impurity(&inst.rows);
        let n = inst.rows.len() as f64;
        let weighted = |f: usize, t: f64| -> Option<f64> {
            let (l, r): (Vec<usize>, Vec<usize>) = inst.rows.iter().partition(|&&i| x.get(i, f) <= t);
            if l.is_empty() || r.is_empty() {
                return None;
            }
            Some(l.len() as f64 / n * impurity(&l) + r.len() as f64 / n * impurity(&r))
        };
        if let Some(s) = best_split(&x, ft.view(), &inst.rows, &inst.features, inst.min_leaf) {
            accepted += 1;
            let w = weighted(s.feature, s.threshold).ok_or("accepted split leaves an empty child")?;
            check(w < parent, || format!("trial {trial}: accepted split child {w} >= parent {parent}"))?;
        }
        let f = rng.random_range(0..x.cols());
        let mut vals: Vec<f64> = inst.rows.iter().map(|&r| x.get(r, f)).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        if vals.len() >= 2 {
            let i = rng.random_range(0..vals.len() - 1);
            let w = weighted(f, midpoint(vals[i], vals[i + 1])).unwrap();
            check(w <= parent + 1e-12 * parent.max(1.0), || {
                format!("trial {trial}: random split child {w} > parent {parent}")
            })?;
        }
    }
    Ok(format!(
        "mt_sse worst rel err {worst_rel:.1e}; gini bounds on 2000 sets; 10000 random + {accepted} accepted splits"
    ))
}

// ---------------------------------------------------------------------------
// Shared synthetic fixture: 3000 fields, noise 0, 80/20 split.

const FIXTURE_TREES: usize = 200;

struct Fixture {
    data: SynthData,
    test: Vec<FieldSeasonRecord>,
    stage1: StageOneModel,
    stage2: StageTwoModel,
    truth: BTreeMap<(String, Nutrient), (Vec<i32>, Vec<f64>)>,
}

fn params(seed: u64, n_trees: usize) -> PipelineParams {
    let mut p = PipelineParams::default();
    p.forest.seed = seed;
    p.forest.n_trees = n_trees;
    p
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let start = Instant::now();
        let data = generate(&SynthConfig {
            n_fields: 3000,
            seed: 2024,
            noise_level: 0.0,
            ..SynthConfig::default()
        })
        .unwrap();
        let (train, test) = split(&data.records, 0.2, 17).unwrap();
        let p = params(5, FIXTURE_TREES);
        let stage1 = train_stage1(&train, Mode::Reproduction, &p).unwrap();
        let stage2 = train_stage2(&train, Mode::Reproduction, &p).unwrap();
        let truth = data
            .truth
            .iter()
            .map(|t| ((t.field_id.clone(), t.nutrient), (t.days.clone(), t.qtys.clone())))
            .collect();
        let secs = start.elapsed().as_secs_f64();
        let _ = FIXTURE_SECS.set(secs);
        Fixture {
            data,
            test,
            stage1,
            stage2,
            truth,
        }
    })
}

fn ac04_stage1_recovery() -> Outcome {
    let start = Instant::now();
    let fx = fixture();
    let acc_n = fx.stage1.classifier(Nutrient::N).accuracy(&fx.test).map_err(|e| e.to_string())?;
    let acc_k = fx.stage1.classifier(Nutrient::K).accuracy(&fx.test).map_err(|e| e.to_string())?;

    let noisy = generate(&SynthConfig {
        n_fields: 3000,
        seed: 2025,
        noise_level: 0.5,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let (ntrain, ntest) = split(&noisy.records, 0.2, 17).map_err(|e| e.to_string())?;
    let clf = train_classifier(&ntrain, Nutrient::N, Mode::Reproduction, &params(5, FIXTURE_TREES))
        .map_err(|e| e.to_string())?;
    let acc_noisy = clf.accuracy(&ntest).map_err(|e| e.to_string())?;

    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "noise 0: N {acc_n:.4}, K {acc_k:.4} (>= 0.95); noise 0.5: N {acc_noisy:.4} (>= 0.80); {secs:.1}s incl. shared training"
    );
    check(acc_n >= 0.95 && acc_k >= 0.95 && acc_noisy >= 0.80, || detail.clone())?;
    check(secs < 300.0, || format!("{detail}; over 5 minutes"))?;
    Ok(detail)
}

fn ac05_stage2_recovery() -> Outcome {
    let fx = fixture();
    let regs = fx.stage2.regressors(Nutrient::N);
    let (mut day_err, mut qty_err, mut n) = (0.0, 0.0, 0usize);
    for r in &fx.test {
        let (days, qtys) = &fx.truth[&(r.field_id.clone(), Nutrient::N)];
        let k = days.len();
        let Some(out) = regs.predict(r, k).map_err(|e| e.to_string())? else {
            continue;
        };
        for i in 0..k {
            qty_err += (out[i] - qtys[i]).abs();
            day_err += (out[k + i] - days[i] as f64).abs();
            n += 1;
        }
    }
    check(n > 0, || "no held-out N applications to score".into())?;
    let (day_mae, qty_mae) = (day_err / n as f64, qty_err / n as f64);
    let r2 = regs.accuracy(&fx.test).map_err(|e| e.to_string())?.unwrap_or(f64::NAN);
    let detail = format!("{n} applications: day MAE {day_mae:.3} (<= 3), qty MAE {qty_mae:.3} (<= 5), R2 {r2:.4} (>= 0.9)");
    check(day_mae <= 3.0 && qty_mae <= 5.0 && r2 >= 0.9, || detail.clone())?;
    Ok(detail)
}

fn ac06_zero_nutrients() -> Outcome {
    let fx = fixture();
    for n in [Nutrient::B, Nutrient::Mn, Nutrient::Ca] {
        let clf = fx.stage1.classifier(n);
        check(clf.model.degenerate, || format!("{n} classifier is not constant"))?;
        let preds = clf.predict(&fx.test).map_err(|e| e.to_string())?;
        check(preds.iter().all(|&p| p == 0), || format!("{n} predicts a nonzero count"))?;
        check(fx.stage2.regressors(n).by_count.is_empty(), || format!("{n} has stage-2 models"))?;
    }

    // The report itself, on a subset so the ten-fold CV stays cheap.
    let mut ep = EvalParams {
        pipeline: params(5, 60),
        ..EvalParams::default()
    };
    ep.probe_field = None;
    let report = build_report(&fx.data.records[..800], &ep).map_err(|e| e.to_string())?;
    for n in [Nutrient::B, Nutrient::Mn, Nutrient::Ca] {
        let row = &report.stage2[n.index()];
        check(
            row.predicted_max_application == 0
                && row.train_accuracy == 0.0
                && row.test_accuracy == 0.0
                && row.cv_folds == 0
                && row.cv_mean == 0.0
                && row.cv_std == 0.0,
            || format!("table2 row for {n} is not all zeros: {row:?}"),
        )?;
        check(report.stage1[n.index()].predicted_max_application == 0, || {
            format!("table1 predicted max for {n} is nonzero")
        })?;
        let t3 = &report.table3[n.index()];
        check(t3.first_model == 0 && t3.refined == 0, || format!("table3 row for {n} is nonzero"))?;
    }
    let zero_line = |n: Nutrient| format!("{},0,0.0000,0.0000,0,0.0000,0.0000", n.name());
    let csv = report.table2_csv();
    for n in [Nutrient::B, Nutrient::Mn, Nutrient::Ca] {
        check(csv.lines().any(|l| l == zero_line(n)), || format!("table2.csv lacks zero row for {n}"))?;
    }
    Ok("B/Mn/Ca: constant-0 stage 1, no stage-2 models, zero rows in tables 1-3".into())
}

fn ac07_refinement() -> Outcome {
    let fx = fixture();
    let fields = &fx.test[..500];
    let mut strict = 0usize;
    let mut strict_example = String::new();
    for r in fields {
        let low = recommend(&fx.stage1, &fx.stage2, r, 5.0).map_err(|e| e.to_string())?;
        let high = recommend(&fx.stage1, &fx.stage2, r, 30.0).map_err(|e| e.to_string())?;
        for rec in [&low, &high] {
            for n in &rec.nutrients {
                check(n.refined_count <= n.raw_count, || {
                    format!("{} {}: refined {} > raw {}", r.field_id, n.nutrient, n.refined_count, n.raw_count)
                })?;
            }
        }
        for n in &high.nutrients {
            if n.refined_count < n.raw_count {
                strict += 1;
                if strict_example.is_empty() {
                    strict_example = format!("{} {} {}->{}", r.field_id, n.nutrient, n.raw_count, n.refined_count);
                }
            }
        }
    }
    check(strict > 0, || "no strict reduction at q_min = 30".into())?;
    Ok(format!("500 fields, refined <= raw; {strict} strict reductions at q_min 30 (e.g. {strict_example})"))
}

fn ac09_timeline_invariants() -> Outcome {
    let fx = fixture();
    let q_mins = [0.0, 5.0, 30.0, 50.0];
    let mut entries = 0usize;
    for (i, r) in fx.data.records.iter().take(1000).enumerate() {
        let q = q_mins[i % q_mins.len()];
        let rec = recommend(&fx.stage1, &fx.stage2, r, q).map_err(|e| e.to_string())?;
        for n in &rec.nutrients {
            let e = &n.timeline.entries;
            entries += e.len();
            check(e.len() == n.refined_count, || format!("{} {}: count mismatch", r.field_id, n.nutrient))?;
            check(e.windows(2).all(|w| w[0].day < w[1].day), || {
                format!("{} {}: days not strictly increasing", r.field_id, n.nutrient)
            })?;
            check(e.iter().all(|x| x.qty_kg_ha >= q), || format!("{} {}: qty below q_min {q}", r.field_id, n.nutrient))?;
            check(e.iter().all(|x| (MIN_DAY..=MAX_DAY).contains(&x.day)), || {
                format!("{} {}: day outside season", r.field_id, n.nutrient)
            })?;
        }
    }
    Ok(format!("1000 recommendations, {entries} entries checked"))
}

// ---------------------------------------------------------------------------
// CV harness

fn ac08_cv_harness() -> Outcome {
    for n in [10, 11, 19, 57, 100, 1001] {
        let folds = kfold_indices(n, 10, n as u64).map_err(|e| e.to_string())?;
        check(folds.len() == 10, || format!("n = {n}: {} folds", folds.len()))?;
        let mut all: Vec<usize> = folds.concat();
        all.sort();
        check(all == (0..n).collect::<Vec<_>>(), || format!("n = {n}: folds do not partition"))?;
        let (lo, hi) = (
            folds.iter().map(Vec::len).min().unwrap(),
            folds.iter().map(Vec::len).max().unwrap(),
        );
        check(hi - lo <= 1, || format!("n = {n}: fold sizes {lo}..{hi}"))?;
    }
    let s = cv_std(&[0.8, 0.9]);
    check(s == 0.05, || format!("cv_std([0.8, 0.9]) = {s:?}"))?;
    for v in [0.0, 0.3, 0.7, 1.0] {
        let s = cv_std(&[v; 10]);
        check(s == 0.0, || format!("cv_std of equal scores {v} = {s}"))?;
    }
    Ok("folds partition for 6 sizes; cv_std([0.8, 0.9]) == 0.05; equal scores -> 0".into())
}

// ---------------------------------------------------------------------------
// CLI-driven criteria

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_agritime")
}

fn run_cli(args: &[&str], threads: Option<usize>) -> Result<String, String> {
    let mut cmd = Command::new(bin());
    cmd.args(args).env_remove("AGRITIME_SEED");
    if let Some(t) = threads {
        cmd.env("RAYON_NUM_THREADS", t.to_string());
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ac03_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    run_cli(&["synth", "--n-fields", "400", "--seed", "9", "--noise", "0.3", "--out", p(&data)], None)?;
    let files = ["table1.csv", "table2.csv", "table3.csv", "schedule.json"];
    let mut runs: Vec<(String, Vec<Vec<u8>>)> = Vec::new();
    for (label, threads) in [("4 threads", 4), ("4 threads again", 4), ("1 thread", 1)] {
        let dir = tmp.path().join(label.replace(' ', "_"));
        let model = dir.join("model.json");
        run_cli(
            &["train", "--data-dir", p(&data), "--model", p(&model), "--n-trees", "60", "--seed", "21"],
            Some(threads),
        )?;
        run_cli(
            &["evaluate", "--data-dir", p(&data), "--out", p(&dir), "--n-trees", "60", "--seed", "21", "--cv-folds", "5"],
            Some(threads),
        )?;
        run_cli(
            &["recommend", "--data-dir", p(&data), "--model", p(&model), "--field-id", "F00007", "--out", p(&dir)],
            Some(threads),
        )?;
        let bytes = files
            .iter()
            .map(|f| std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        runs.push((label.to_string(), bytes));
    }
    for (label, bytes) in &runs[1..] {
        for (i, f) in files.iter().enumerate() {
            check(bytes[i] == runs[0].1[i], || format!("{f} differs between {} and {label}", runs[0].0))?;
        }
    }
    Ok("table1/2/3.csv and schedule.json byte-identical across 3 runs (4, 4, 1 threads)".into())
}

fn attr(tag: &str, name: &str) -> Option<String> {
    let key = format!("{name}=\"");
    let start = tag.find(&key)? + key.len();
    let end = tag[start..].find('"')? + start;
    Some(tag[start..end].to_string())
}

fn elements<'a>(svg: &'a str, class: &str) -> Vec<&'a str> {
    let key = format!("class=\"{class}\"");
    svg.lines().filter(|l| l.contains(&key)).collect()
}

fn ac10_chart_parity() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let train_dir = tmp.path().join("train");
    let probe_dir = tmp.path().join("probe");
    let model = tmp.path().join("model.json");
    run_cli(&["synth", "--n-fields", "3000", "--seed", "101", "--noise", "0", "--out", p(&train_dir)], None)?;
    run_cli(&["train", "--data-dir", p(&train_dir), "--model", p(&model), "--seed", "3"], None)?;

    // A held-out clay field on the base pattern: three N applications, no day shift.
    let probe = generate(&SynthConfig {
        n_fields: 300,
        seed: 202,
        noise_level: 0.0,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let rules = &probe.config.rules;
    let field = probe
        .records
        .iter()
        .find(|r| {
            let d = Drivers::from_record(r).unwrap();
            let t = probe.truth_for(&r.field_id, Nutrient::N).unwrap();
            d.soil == "clay"
                && rules.day_shift(d.autumn_temp_c) == 0
                && d.spring_rain_mm > rules.spring_rain_threshold_mm + 10.0
                && t.days == [115, 185, 220]
        })
        .ok_or("no base-pattern clay field in the probe set")?
        .field_id
        .clone();
    agritime::synth::write_csvs(&probe, &probe_dir).map_err(|e| e.to_string())?;
    let out = tmp.path().join("rec");
    run_cli(
        &["recommend", "--data-dir", p(&probe_dir), "--model", p(&model), "--field-id", &field, "--out", p(&out), "--svg"],
        None,
    )?;
    let svg = std::fs::read_to_string(out.join("schedule_N.svg")).map_err(|e| e.to_string())?;
    let bars = elements(&svg, "bar");
    let markers = elements(&svg, "day-marker");
    check(bars.len() == 3 && markers.len() == 3, || {
        format!("{} bars, {} markers", bars.len(), markers.len())
    })?;
    let expected = [(115, 40.0), (185, 60.0), (220, 80.0)];
    let mut got = Vec::new();
    for ((bar, marker), (day, qty)) in bars.iter().zip(&markers).zip(expected) {
        let bd: i32 = attr(bar, "data-day").and_then(|v| v.parse().ok()).ok_or("bar without data-day")?;
        let bq: f64 = attr(bar, "data-qty").and_then(|v| v.parse().ok()).ok_or("bar without data-qty")?;
        let md: i32 = attr(marker, "data-day").and_then(|v| v.parse().ok()).ok_or("marker without data-day")?;
        check(bd == md, || format!("bar day {bd} vs marker day {md}"))?;
        check((bd - day).abs() <= 3 && (bq - qty).abs() <= 5.0, || {
            format!("bar ({bd}, {bq:.1}) vs expected ({day}, {qty})")
        })?;
        got.push(format!("{bq:.1}@{bd}"));
    }
    check(svg.contains("class=\"total\""), || "no total annotation".into())?;
    for n in [Nutrient::P, Nutrient::B, Nutrient::Mn, Nutrient::Ca] {
        check(!out.join(format!("schedule_{}.svg", n.symbol())).exists(), || {
            format!("chart emitted for inactive {n}")
        })?;
    }
    Ok(format!("field {field}: N bars {}", got.join(", ")))
}

// ---------------------------------------------------------------------------
// Serialization

fn ac11_round_trip() -> Outcome {
    let data = generate(&SynthConfig {
        n_fields: 400,
        seed: 77,
        noise_level: 0.4,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let pp = params(8, 40);
    let s1 = train_stage1(&data.records, Mode::Reproduction, &pp).map_err(|e| e.to_string())?;
    let s2 = train_stage2(&data.records, Mode::Reproduction, &pp).map_err(|e| e.to_string())?;
    let bundle = ModelBundle::new(s1, s2, pp).map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path: PathBuf = tmp.path().join("model.json");
    save_models(&bundle, &path).map_err(|e| e.to_string())?;
    let loaded = load_models(&path).map_err(|e| e.to_string())?;
    check(loaded == bundle, || "loaded bundle differs structurally".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(0xAC11);
    let mut compared = 0usize;
    for _ in 0..100 {
        for n in Nutrient::ALL {
            let (a, b) = (&bundle.stage1.classifier(n).model, &loaded.stage1.classifier(n).model);
            let probe: Vec<f64> = (0..a.n_features()).map(|_| rng.random_range(-50.0..500.0)).collect();
            let (va, vb) = (a.class_votes(&probe).unwrap(), b.class_votes(&probe).unwrap());
            check(va.iter().map(|v| v.to_bits()).eq(vb.iter().map(|v| v.to_bits())), || {
                format!("{n} stage-1 votes differ")
            })?;
            compared += 1;
            for (k, ma) in &bundle.stage2.regressors(n).by_count {
                let mb = &loaded.stage2.regressors(n).by_count[k];
                let probe: Vec<f64> = (0..ma.n_features()).map(|_| rng.random_range(-50.0..500.0)).collect();
                let (pa, pb) = (ma.predict_values(&probe).unwrap(), mb.predict_values(&probe).unwrap());
                check(pa.iter().map(|v| v.to_bits()).eq(pb.iter().map(|v| v.to_bits())), || {
                    format!("{n} k={k} stage-2 output differs")
                })?;
                compared += 1;
            }
        }
    }
    for r in data.records.iter().take(100) {
        let a = recommend(&bundle.stage1, &bundle.stage2, r, 5.0).map_err(|e| e.to_string())?;
        let b = recommend(&loaded.stage1, &loaded.stage2, r, 5.0).map_err(|e| e.to_string())?;
        check(
            serde_json::to_string(&a).unwrap() == serde_json::to_string(&b).unwrap(),
            || format!("recommendation for {} differs", r.field_id),
        )?;
    }
    Ok(format!("{compared} forest probes bitwise identical; 100 recommendations identical"))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("AC01", "split-search oracle equivalence", ac01_split_oracle),
        ("AC02", "impurity identities", ac02_impurity_identities),
        ("AC03", "determinism across runs and thread counts", ac03_determinism),
        ("AC04", "synthetic stage-1 recovery", ac04_stage1_recovery),
        ("AC05", "synthetic stage-2 recovery", ac05_stage2_recovery),
        ("AC06", "zero-nutrient behaviour", ac06_zero_nutrients),
        ("AC07", "refinement never adds applications", ac07_refinement),
        ("AC08", "cross-validation harness", ac08_cv_harness),
        ("AC09", "timeline invariants", ac09_timeline_invariants),
        ("AC10", "timeline chart parity", ac10_chart_parity),
        ("AC11", "model round-trip", ac11_round_trip),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let start = Instant::now();
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|s| id.contains(s.as_str()) || name.contains(s.as_str())) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id} PASS {name} [{secs:.1}s]: {detail}"),
            Err(why) => {
                failed += 1;
                println!("{id} FAIL {name} [{secs:.1}s]: {why}");
            }
        }
    }
    if let Some(fx) = FIXTURE_SECS.get() {
        println!("shared fixture training: {fx:.1}s");
    }
    println!(
        "acceptance: {} passed, {failed} failed, {:.1}s total",
        ran - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

static FIXTURE_SECS: OnceLock<f64> = OnceLock::new();
