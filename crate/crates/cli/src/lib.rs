//! Command implementations behind the `agritime` binary.
//!
//! Each subcommand records its resolved arguments as a [`RunConfig`] in
//! `run_config.json` before doing any work. The binary only parses arguments
//! and maps errors to an exit code.

pub mod svg;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use agritime::dataset::{clean, load_dir, CleanPolicy, FieldSeasonRecord, Nutrient};
use agritime::eval::{build_report, EvalParams};
use agritime::pipeline::{
    load_models, recommend, save_models, train_stage1, train_stage2, ModelBundle, Mode, PipelineParams,
    Recommendation, DEFAULT_Q_MIN,
};
use agritime::synth::{generate, write_csvs, SynthConfig};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const SCHEDULE_CSV_HEADER: &str = "nutrient,app_index,day,qty_kg_ha,total_qty_kg_ha,expected_yield_t_ha";

#[derive(Debug, Parser)]
#[command(name = "agritime", version, about = "Two-stage fertiliser timeline recommender")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with known ground truth.
    Synth(SynthArgs),
    /// Train both stages and save the model file.
    Train(TrainArgs),
    /// Train on a split and write the accuracy tables.
    Evaluate(EvaluateArgs),
    /// Produce an application schedule for one field.
    Recommend(RecommendArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SeedArg {
    /// Master seed; every random stream derives from it.
    #[arg(long, env = "AGRITIME_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3000)]
    pub n_fields: usize,
    /// Perturbation level in [0, 1].
    #[arg(long, default_value_t = 0.0, value_parser = parse_noise)]
    pub noise: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ForestArgs {
    #[arg(long, default_value_t = 200)]
    pub n_trees: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Where to write the model JSON.
    #[arg(long)]
    pub model: PathBuf,
    /// Directory for the run record; defaults to the model's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "recommendation", value_parser = parse_mode)]
    pub mode: Mode,
    #[command(flatten)]
    #[serde(flatten)]
    pub forest: ForestArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.2, value_parser = parse_fraction)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 10)]
    pub cv_folds: usize,
    #[arg(long, default_value_t = DEFAULT_Q_MIN)]
    pub q_min: f64,
    /// Probe field for table3.csv; defaults to the first test field.
    #[arg(long)]
    pub field_id: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub forest: ForestArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RecommendArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub field_id: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Expected model mode; a model trained in another mode is rejected.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long, default_value_t = DEFAULT_Q_MIN)]
    pub q_min: f64,
    /// Also write one SVG chart per nutrient with applications.
    #[arg(long)]
    pub svg: bool,
}

fn parse_noise(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("noise must be in [0, 1], got {v}"))
    }
}

fn parse_fraction(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("test fraction must be in (0, 1), got {v}"))
    }
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

/// The fully resolved arguments of one invocation.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub subcommand: &'static str,
    pub tool_version: &'static str,
    #[serde(flatten)]
    pub args: RunArgs,
    /// Pipeline parameters actually used, when the command trains anything.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<PipelineParams>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum RunArgs {
    Synth(SynthArgs),
    Train(TrainArgs),
    Evaluate(EvaluateArgs),
    Recommend(RecommendArgs),
}

fn write_run_config(dir: &Path, config: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let path = dir.join(RUN_CONFIG_FILE);
    let text = serde_json::to_string_pretty(config)? + "\n";
    fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn pipeline_params(forest: &ForestArgs, seed: u64) -> PipelineParams {
    let mut p = PipelineParams::default();
    p.forest.n_trees = forest.n_trees;
    p.forest.seed = seed;
    p
}

/// Loads the standard files from `dir` and applies the default cleaning.
pub fn load_clean(dir: &Path) -> Result<Vec<FieldSeasonRecord>> {
    let raw = load_dir(dir)?;
    let records = clean(&raw, &CleanPolicy::default());
    log::info!("loaded {} records ({} after cleaning)", raw.len(), records.len());
    Ok(records)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Recommend(a) => cmd_recommend(&a).map(|_| ()),
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    write_run_config(
        &args.out,
        &RunConfig {
            subcommand: "synth",
            tool_version: env!("CARGO_PKG_VERSION"),
            args: RunArgs::Synth(args.clone()),
            pipeline: None,
        },
    )?;
    let config = SynthConfig {
        n_fields: args.n_fields,
        seed: args.seed.seed,
        noise_level: args.noise,
        ..SynthConfig::default()
    };
    let data = generate(&config)?;
    for (name, rows) in write_csvs(&data, &args.out)? {
        println!("{name}: {rows} rows");
    }
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let out = match &args.out {
        Some(d) => d.clone(),
        None => args
            .model
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    let params = pipeline_params(&args.forest, args.seed.seed);
    write_run_config(
        &out,
        &RunConfig {
            subcommand: "train",
            tool_version: env!("CARGO_PKG_VERSION"),
            args: RunArgs::Train(args.clone()),
            pipeline: Some(params),
        },
    )?;
    let records = load_clean(&args.data_dir)?;
    let stage1 = train_stage1(&records, args.mode, &params)?;
    let stage2 = train_stage2(&records, args.mode, &params)?;

    println!("mode: {}", args.mode);
    println!("{:<4} {:>10} {:>14} {:>10}", "nut", "train_acc", "stage2_models", "max_k");
    for n in Nutrient::ALL {
        let acc = stage1.classifier(n).accuracy(&records)?;
        let regs = stage2.regressors(n);
        println!(
            "{:<4} {:>10.4} {:>14} {:>10}",
            n.symbol(),
            acc,
            regs.by_count.len(),
            regs.max_count().unwrap_or(0)
        );
    }

    let bundle = ModelBundle::new(stage1, stage2, params)?;
    if let Some(dir) = args.model.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    save_models(&bundle, &args.model)?;
    println!("model written to {}", args.model.display());
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    if args.cv_folds < 2 {
        bail!("--cv-folds must be at least 2");
    }
    let params = EvalParams {
        pipeline: pipeline_params(&args.forest, args.seed.seed),
        test_fraction: args.test_fraction,
        cv_folds: args.cv_folds,
        q_min: args.q_min,
        probe_field: args.field_id.clone(),
        ..EvalParams::default()
    };
    write_run_config(
        &args.out,
        &RunConfig {
            subcommand: "evaluate",
            tool_version: env!("CARGO_PKG_VERSION"),
            args: RunArgs::Evaluate(args.clone()),
            pipeline: Some(params.pipeline),
        },
    )?;
    let records = load_clean(&args.data_dir)?;
    let report = build_report(&records, &params)?;
    write_file(&args.out.join("table1.csv"), &report.table1_csv())?;
    write_file(&args.out.join("table2.csv"), &report.table2_csv())?;
    write_file(&args.out.join("table3.csv"), &report.table3_csv())?;
    let text = report.render_text();
    write_file(&args.out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleEntry {
    pub day: i32,
    pub qty_kg_ha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NutrientSchedule {
    pub nutrient: Nutrient,
    pub name: &'static str,
    pub first_model_count: usize,
    pub refined_count: usize,
    pub entries: Vec<ScheduleEntry>,
    pub total_qty_kg_ha: f64,
    pub expected_yield_t_ha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Schedule {
    pub field_id: String,
    pub mode: Mode,
    pub q_min: f64,
    pub expected_yield_t_ha: Option<f64>,
    pub nutrients: Vec<NutrientSchedule>,
}

impl Schedule {
    pub fn from_recommendation(rec: &Recommendation, q_min: f64) -> Self {
        let nutrients = rec
            .nutrients
            .iter()
            .map(|n| NutrientSchedule {
                nutrient: n.nutrient,
                name: n.nutrient.name(),
                first_model_count: n.raw_count,
                refined_count: n.refined_count,
                entries: n
                    .timeline
                    .entries
                    .iter()
                    .map(|e| ScheduleEntry {
                        day: e.day,
                        qty_kg_ha: e.qty_kg_ha,
                    })
                    .collect(),
                total_qty_kg_ha: n.timeline.total_qty_kg_ha,
                expected_yield_t_ha: n.timeline.expected_yield_t_ha,
            })
            .collect();
        Self {
            field_id: rec.field_id.clone(),
            mode: rec.mode,
            q_min,
            expected_yield_t_ha: rec.expected_yield_t_ha,
            nutrients,
        }
    }

    /// One row per application; nutrients without applications have no rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(SCHEDULE_CSV_HEADER);
        s.push('\n');
        for n in &self.nutrients {
            let y = n.expected_yield_t_ha.map(|y| y.to_string()).unwrap_or_default();
            for (i, e) in n.entries.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    n.nutrient.symbol(),
                    i + 1,
                    e.day,
                    e.qty_kg_ha,
                    n.total_qty_kg_ha,
                    y
                );
            }
        }
        s
    }
}

/// Writes `schedule.json`, `schedule.csv` and, with `--svg`, the charts.
/// Returns the schedule that was written.
pub fn cmd_recommend(args: &RecommendArgs) -> Result<Schedule> {
    let bundle = load_models(&args.model)?;
    if let Some(mode) = args.mode {
        if mode != bundle.mode {
            return Err(agritime::Error::ModeMismatch {
                model: bundle.mode.to_string(),
                requested: mode.to_string(),
            }
            .into());
        }
    }
    write_run_config(
        &args.out,
        &RunConfig {
            subcommand: "recommend",
            tool_version: env!("CARGO_PKG_VERSION"),
            args: RunArgs::Recommend(args.clone()),
            pipeline: Some(bundle.params),
        },
    )?;
    eprintln!("model mode: {}", bundle.mode);

    let records = load_clean(&args.data_dir)?;
    let Some(record) = records.iter().find(|r| r.field_id == args.field_id) else {
        return Err(agritime::Error::InvalidInput(format!("field `{}` not found in {}", args.field_id, args.data_dir.display())).into());
    };
    let rec = recommend(&bundle.stage1, &bundle.stage2, record, args.q_min)?;
    let schedule = Schedule::from_recommendation(&rec, args.q_min);

    write_file(&args.out.join("schedule.json"), &(serde_json::to_string_pretty(&schedule)? + "\n"))?;
    write_file(&args.out.join("schedule.csv"), &schedule.to_csv())?;
    if args.svg {
        for n in schedule.nutrients.iter().filter(|n| !n.entries.is_empty()) {
            let path = args.out.join(svg::file_name(n.nutrient));
            write_file(&path, &svg::render(&schedule.field_id, n))?;
        }
    }

    for n in &schedule.nutrients {
        let days: Vec<String> = n.entries.iter().map(|e| format!("d{}:{:.1}", e.day, e.qty_kg_ha)).collect();
        println!(
            "{:<10} first={} refined={} total={:.1} kg/ha  {}",
            n.name,
            n.first_model_count,
            n.refined_count,
            n.total_qty_kg_ha,
            days.join(" ")
        );
    }
    if let Some(y) = schedule.expected_yield_t_ha {
        println!("expected yield: {y:.2} t/ha");
    }
    Ok(schedule)
}
