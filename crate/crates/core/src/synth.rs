//! Synthetic winter-wheat seasons generated from a fixed rule table.
//!
//! Weather is a seasonal sinusoid plus seeded noise, run through the same
//! cleaning as real data before any rule reads it, so cleaning the output
//! again changes nothing. Application counts, days, quantities and yield then
//! follow [`RuleTable`] exactly; `noise_level` only perturbs quantities, days
//! and yield.

use std::fmt::Write as _;
use std::path::Path;

use chrono::{Datelike, Days, NaiveDate};
use rand::Rng as _;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    build_timeline, clean, ApplicationEvent, CleanPolicy, FieldSeasonRecord, Nutrient, WeatherDay, APPLICATIONS_HEADER,
    FIELDS_HEADER, PRODUCTS_HEADER, WEATHER_HEADER,
};
use crate::error::{Error, Result};
use crate::par::{map_indices, Execution};
use crate::rng::{derive_seed, rng_from};

/// Every constant the generator's rules use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleTable {
    pub season_year: i32,
    /// Spring-window (days 121-180) rain above which N gets three applications.
    pub spring_rain_threshold_mm: f64,
    pub n3_days: [i32; 3],
    pub n3_qty: [f64; 3],
    pub n2_days: [i32; 2],
    pub n2_qty: [f64; 2],
    /// Mean temperature over days 0-60 at which the day shift is zero.
    pub reference_temp_c: f64,
    /// Day shift per degree of autumn warmth (earlier when warmer).
    pub shift_days_per_c: f64,
    pub max_shift_days: i32,
    pub k_day: i32,
    pub k_qty: f64,
    /// Non-sandy fields get K when autumn is colder than this.
    pub k_cold_autumn_c: f64,
    pub s_day: i32,
    pub s_qty: f64,
    pub s_soils: Vec<String>,
    pub mg_day: i32,
    pub mg_qty: f64,
    pub mg_soils: Vec<String>,
    /// (soil, multiplier) on every quantity; unlisted soils use 1.
    pub soil_qty_factor: Vec<(String, f64)>,
    pub yield_base_t_ha: f64,
    pub yield_linear: f64,
    pub yield_quadratic: f64,
    pub optimal_n_kg_ha: f64,
    pub qty_sigma_kg_ha: f64,
    pub day_sigma: f64,
    pub yield_sigma_t_ha: f64,
}

impl Default for RuleTable {
    fn default() -> Self {
        Self {
            season_year: 2021,
            spring_rain_threshold_mm: 120.0,
            n3_days: [115, 185, 220],
            n3_qty: [40.0, 60.0, 80.0],
            n2_days: [115, 220],
            n2_qty: [60.0, 80.0],
            reference_temp_c: 8.0,
            shift_days_per_c: 1.5,
            max_shift_days: 10,
            k_day: 100,
            k_qty: 24.0,
            k_cold_autumn_c: 7.0,
            s_day: 117,
            s_qty: 82.0,
            s_soils: vec!["clay".into(), "loam".into()],
            mg_day: 140,
            mg_qty: 15.0,
            mg_soils: vec!["sandy".into(), "peat".into()],
            soil_qty_factor: vec![
                ("clay".into(), 1.0),
                ("loam".into(), 1.05),
                ("sandy".into(), 1.1),
                ("peat".into(), 0.95),
            ],
            yield_base_t_ha: 9.9,
            yield_linear: 0.0,
            yield_quadratic: 0.0004,
            optimal_n_kg_ha: 177.0,
            qty_sigma_kg_ha: 5.0,
            day_sigma: 7.0,
            yield_sigma_t_ha: 0.4,
        }
    }
}

impl RuleTable {
    pub fn soil_factor(&self, soil: &str) -> f64 {
        self.soil_qty_factor
            .iter()
            .find(|(s, _)| s == soil)
            .map_or(1.0, |(_, f)| *f)
    }

    /// Application-day shift from the mean temperature over days 0-60.
    pub fn day_shift(&self, autumn_temp_c: f64) -> i32 {
        let raw = (-self.shift_days_per_c * (autumn_temp_c - self.reference_temp_c)).round() as i32;
        raw.clamp(-self.max_shift_days, self.max_shift_days)
    }

    pub fn n_count(&self, spring_rain_mm: f64) -> usize {
        if spring_rain_mm > self.spring_rain_threshold_mm {
            3
        } else {
            2
        }
    }

    pub fn k_count(&self, soil: &str, autumn_temp_c: f64) -> usize {
        usize::from(soil == "sandy" || autumn_temp_c < self.k_cold_autumn_c)
    }

    /// Noise-free yield for a season total of N.
    pub fn yield_for(&self, total_n: f64) -> f64 {
        let d = total_n - self.optimal_n_kg_ha;
        self.yield_base_t_ha + self.yield_linear * total_n - self.yield_quadratic * d * d
    }

    /// Noise-free (day, qty) schedule for one nutrient.
    pub fn schedule(&self, nutrient: Nutrient, drivers: &Drivers) -> Vec<(i32, f64)> {
        let f = self.soil_factor(&drivers.soil);
        let shift = self.day_shift(drivers.autumn_temp_c);
        let single = |day: i32, qty: f64| vec![(day + shift, qty * f)];
        match nutrient {
            Nutrient::N => {
                if self.n_count(drivers.spring_rain_mm) == 3 {
                    self.n3_days
                        .iter()
                        .zip(self.n3_qty)
                        .map(|(&d, q)| (d + shift, q * f))
                        .collect()
                } else {
                    self.n2_days
                        .iter()
                        .zip(self.n2_qty)
                        .map(|(&d, q)| (d + shift, q * f))
                        .collect()
                }
            }
            Nutrient::K if self.k_count(&drivers.soil, drivers.autumn_temp_c) == 1 => single(self.k_day, self.k_qty),
            Nutrient::S if self.s_soils.contains(&drivers.soil) => single(self.s_day, self.s_qty),
            Nutrient::Mg if self.mg_soils.contains(&drivers.soil) => single(self.mg_day, self.mg_qty),
            _ => Vec::new(),
        }
    }
}

/// The record properties the rules read.
#[derive(Debug, Clone, PartialEq)]
pub struct Drivers {
    pub soil: String,
    /// Mean of daily mean temperature over days 0-60.
    pub autumn_temp_c: f64,
    /// Total rain over days 121-180.
    pub spring_rain_mm: f64,
}

impl Drivers {
    /// Reads the drivers from a cleaned record.
    pub fn from_record(record: &FieldSeasonRecord) -> Result<Self> {
        let seeding = record
            .seeding_date
            .ok_or_else(|| Error::InvalidInput(format!("record `{}` has no seeding date", record.field_id)))?;
        let soil = record
            .soil_type
            .clone()
            .ok_or_else(|| Error::InvalidInput(format!("record `{}` has no soil type", record.field_id)))?;
        let mut temp_sum = 0.0;
        let mut temp_n = 0usize;
        let mut rain = 0.0;
        for w in &record.weather {
            let d = (w.date - seeding).num_days();
            if (0..=60).contains(&d) {
                temp_sum += w.mean_temp();
                temp_n += 1;
            }
            if (121..=180).contains(&d) {
                rain += w.rain_mm;
            }
        }
        Ok(Self {
            soil,
            autumn_temp_c: if temp_n > 0 { temp_sum / temp_n as f64 } else { 0.0 },
            spring_rain_mm: rain,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_fields: usize,
    pub seed: u64,
    /// In [0, 1]; scales the quantity, day and yield perturbations.
    pub noise_level: f64,
    pub soils: Vec<String>,
    pub rules: RuleTable,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_fields: 3000,
            seed: 0,
            noise_level: 0.0,
            soils: ["clay", "loam", "sandy", "peat"].map(String::from).to_vec(),
            rules: RuleTable::default(),
        }
    }
}

/// What the generator actually applied to one nutrient of one field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub field_id: String,
    pub nutrient: Nutrient,
    pub count: usize,
    pub days: Vec<i32>,
    pub qtys: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub config: SynthConfig,
    pub records: Vec<FieldSeasonRecord>,
    /// Eight entries per field, in record then nutrient order.
    pub truth: Vec<GroundTruth>,
    /// Weather as generated, before cleaning. This is what [`write_csvs`]
    /// emits, so loading and cleaning the files reproduces `records`.
    pub raw_weather: Vec<Vec<WeatherDay>>,
}

impl SynthData {
    pub fn truth_for(&self, field_id: &str, nutrient: Nutrient) -> Option<&GroundTruth> {
        self.truth
            .iter()
            .find(|t| t.field_id == field_id && t.nutrient == nutrient)
    }
}

const SEASON_DAYS: u64 = 365;

fn raw_field(config: &SynthConfig, i: usize) -> FieldSeasonRecord {
    let mut rng = rng_from(derive_seed(config.seed, i as u64));
    let soil = config.soils[rng.random_range(0..config.soils.len())].clone();
    let area_ha = rng.random_range(5.0..60.0);
    let seeding = NaiveDate::from_ymd_opt(config.rules.season_year, 10, rng.random_range(1..=31)).expect("valid October date");
    let climate = rng.random_range(-3.0..3.0);
    let wetness = rng.random_range(0.4..1.6);
    let temp_noise = Normal::new(0.0, 1.5).expect("finite sigma");
    let unit = Normal::new(0.0, 1.0).expect("finite sigma");

    let two_pi = std::f64::consts::TAU;
    let weather = (0..SEASON_DAYS)
        .map(|t| {
            let date = seeding + Days::new(t);
            let phase = two_pi * (date.ordinal() as f64 - 110.0) / 365.0;
            let tmean = 10.5 + 8.0 * phase.sin() + climate + temp_noise.sample(&mut rng);
            let dtr = (8.0 + 2.0 * phase.sin() + unit.sample(&mut rng)).max(1.0);
            let rain_base = 2.0 * wetness * (1.0 + 0.3 * (two_pi * date.ordinal() as f64 / 365.0).cos());
            let e: f64 = Exp1.sample(&mut rng);
            WeatherDay {
                date,
                tmin_c: tmean - dtr / 2.0,
                tmax_c: tmean + dtr / 2.0,
                rain_mm: rain_base * e,
                sun_hours: (4.5 + 3.5 * phase.sin() + 1.5 * unit.sample(&mut rng)).clamp(0.0, 16.0),
                wind_kph: (15.0 + 4.0 * unit.sample(&mut rng)).max(0.0),
                humidity_pct: (80.0 - 10.0 * phase.sin() + 5.0 * unit.sample(&mut rng)).clamp(20.0, 100.0),
            }
        })
        .collect();

    FieldSeasonRecord {
        field_id: format!("F{:05}", i + 1),
        area_ha,
        soil_type: Some(soil),
        seeding_date: Some(seeding),
        weather,
        applications: Vec::new(),
        yield_t_ha: None,
        weather_smoothed: false,
    }
}

/// Applications and yield for one cleaned record.
fn apply_rules(config: &SynthConfig, i: usize, record: &mut FieldSeasonRecord) -> Result<Vec<GroundTruth>> {
    let rules = &config.rules;
    let drivers = Drivers::from_record(record)?;
    let mut rng = rng_from(derive_seed(derive_seed(config.seed, i as u64), 0xA991));
    let noise = config.noise_level;
    let unit = Normal::new(0.0, 1.0).expect("finite sigma");

    let mut truth = Vec::with_capacity(Nutrient::ALL.len());
    for nutrient in Nutrient::ALL {
        let mut events: Vec<(i32, f64)> = rules
            .schedule(nutrient, &drivers)
            .into_iter()
            .map(|(day, qty)| {
                let dq = rules.qty_sigma_kg_ha * noise * unit.sample(&mut rng);
                let dd = rules.day_sigma * noise * unit.sample(&mut rng);
                let day = (day as f64 + dd).round() as i32;
                (day, (qty + dq).max(0.0))
            })
            .collect();
        events.sort_by_key(|e| e.0);
        record.applications.extend(events.iter().map(|&(day, qty_kg_ha)| ApplicationEvent {
            nutrient,
            day,
            qty_kg_ha,
        }));
        let merged = build_timeline(record, nutrient);
        truth.push(GroundTruth {
            field_id: record.field_id.clone(),
            nutrient,
            count: merged.count(),
            days: merged.entries.iter().map(|e| e.day).collect(),
            qtys: merged.entries.iter().map(|e| e.qty_kg_ha).collect(),
        });
    }
    let total_n = build_timeline(record, Nutrient::N).total_qty_kg_ha;
    let y = rules.yield_for(total_n) + rules.yield_sigma_t_ha * noise * unit.sample(&mut rng);
    record.yield_t_ha = Some(y.max(0.0));
    Ok(truth)
}

pub fn generate(config: &SynthConfig) -> Result<SynthData> {
    generate_with(config, Execution::default())
}

pub fn generate_with(config: &SynthConfig, exec: Execution) -> Result<SynthData> {
    if !(0.0..=1.0).contains(&config.noise_level) {
        return Err(Error::InvalidInput(format!(
            "noise level must be in [0, 1], got {}",
            config.noise_level
        )));
    }
    if config.soils.is_empty() {
        return Err(Error::InvalidInput("soil vocabulary is empty".into()));
    }
    let raw = map_indices(config.n_fields, exec, |i| raw_field(config, i));
    let mut records = clean(&raw, &CleanPolicy::default());
    debug_assert_eq!(records.len(), config.n_fields);
    let truths = map_indices(records.len(), exec, |i| {
        let mut r = records[i].clone();
        apply_rules(config, i, &mut r).map(|t| (r, t))
    });
    let mut truth = Vec::with_capacity(records.len() * Nutrient::ALL.len());
    for (slot, res) in records.iter_mut().zip(truths) {
        let (r, t) = res?;
        *slot = r;
        truth.extend(t);
    }
    Ok(SynthData {
        config: config.clone(),
        records,
        truth,
        raw_weather: raw.into_iter().map(|r| r.weather).collect(),
    })
}

// ---------------------------------------------------------------------------
// CSV output

/// Names of the files [`write_csvs`] produces.
pub const OUTPUT_FILES: [&str; 5] = [
    "fields.csv",
    "weather.csv",
    "applications.csv",
    "products.csv",
    "ground_truth.csv",
];

/// Straight single-nutrient product used for every synthetic application.
pub fn product_name(n: Nutrient) -> String {
    format!("straight {}", n.symbol())
}

fn join_list<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

/// Row counts per written file, in [`OUTPUT_FILES`] order.
pub fn write_csvs(data: &SynthData, dir: &Path) -> Result<Vec<(String, usize)>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(String, String, usize)> = Vec::new();

    let mut s = FIELDS_HEADER.join(",") + "\n";
    for r in &data.records {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.field_id,
            r.area_ha,
            r.soil_type.as_deref().unwrap_or(""),
            r.seeding_date.map(|d| d.to_string()).unwrap_or_default(),
            r.yield_t_ha.map(|y| y.to_string()).unwrap_or_default()
        );
    }
    files.push((OUTPUT_FILES[0].into(), s, data.records.len()));

    let mut s = WEATHER_HEADER.join(",") + "\n";
    let mut n = 0;
    for (r, weather) in data.records.iter().zip(&data.raw_weather) {
        for w in weather {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.field_id, w.date, w.tmin_c, w.tmax_c, w.rain_mm, w.sun_hours, w.wind_kph, w.humidity_pct
            );
            n += 1;
        }
    }
    files.push((OUTPUT_FILES[1].into(), s, n));

    let mut s = APPLICATIONS_HEADER.join(",") + "\n";
    let mut n = 0;
    for r in &data.records {
        let seeding = r.seeding_date.expect("generated records have a seeding date");
        for e in &r.applications {
            let date = seeding + chrono::Duration::days(e.day as i64);
            let _ = writeln!(s, "{},{},{},{}", r.field_id, date, product_name(e.nutrient), e.qty_kg_ha);
            n += 1;
        }
    }
    files.push((OUTPUT_FILES[2].into(), s, n));

    let mut s = PRODUCTS_HEADER.join(",") + "\n";
    for nutrient in Nutrient::ALL {
        let fr: Vec<&str> = Nutrient::ALL
            .iter()
            .map(|&m| if m == nutrient { "1" } else { "0" })
            .collect();
        let _ = writeln!(s, "{},{}", product_name(nutrient), fr.join(","));
    }
    files.push((OUTPUT_FILES[3].into(), s, Nutrient::ALL.len()));

    let mut s = String::from("field_id,nutrient,count,days,qtys\n");
    for t in &data.truth {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            t.field_id,
            t.nutrient,
            t.count,
            join_list(&t.days),
            join_list(&t.qtys)
        );
    }
    files.push((OUTPUT_FILES[4].into(), s, data.truth.len()));

    let mut counts = Vec::new();
    for (name, text, rows) in files {
        let path = dir.join(&name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        counts.push((name, rows));
    }
    Ok(counts)
}
