//! Field-season records: CSV ingestion, cleaning, per-nutrient timelines and
//! feature encoding.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Earliest application day kept by cleaning (pre-seeding base dressing).
pub const MIN_DAY: i32 = -30;
/// Latest application day kept by cleaning.
pub const MAX_DAY: i32 = 330;

/// Weather aggregation windows, inclusive days from seeding.
pub const WEATHER_WINDOWS: [(i32, i32); 4] = [(0, 60), (61, 120), (121, 180), (181, 240)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Nutrient {
    N,
    P,
    K,
    S,
    Mg,
    B,
    Mn,
    Ca,
}

impl Nutrient {
    pub const ALL: [Nutrient; 8] = [
        Nutrient::N,
        Nutrient::P,
        Nutrient::K,
        Nutrient::S,
        Nutrient::Mg,
        Nutrient::B,
        Nutrient::Mn,
        Nutrient::Ca,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Nutrient::N => "N",
            Nutrient::P => "P",
            Nutrient::K => "K",
            Nutrient::S => "S",
            Nutrient::Mg => "Mg",
            Nutrient::B => "B",
            Nutrient::Mn => "Mn",
            Nutrient::Ca => "Ca",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Nutrient::N => "Nitrogen",
            Nutrient::P => "Phosphorus",
            Nutrient::K => "Potassium",
            Nutrient::S => "Sulphur",
            Nutrient::Mg => "Magnesium",
            Nutrient::B => "Boron",
            Nutrient::Mn => "Manganese",
            Nutrient::Ca => "Calcium",
        }
    }
}

impl fmt::Display for Nutrient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for Nutrient {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Nutrient::ALL
            .into_iter()
            .find(|n| n.symbol().eq_ignore_ascii_case(s) || n.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown nutrient `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApplicationEvent {
    pub nutrient: Nutrient,
    /// Days from seeding; negative for pre-seeding dressings.
    pub day: i32,
    pub qty_kg_ha: f64,
}

/// One day of weather. Missing values are NaN until cleaned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherDay {
    pub date: NaiveDate,
    pub tmin_c: f64,
    pub tmax_c: f64,
    pub rain_mm: f64,
    pub sun_hours: f64,
    pub wind_kph: f64,
    pub humidity_pct: f64,
}

pub const WEATHER_VARS: [&str; 6] = ["tmin_c", "tmax_c", "rain_mm", "sun_hours", "wind_kph", "humidity_pct"];

impl WeatherDay {
    pub fn values(&self) -> [f64; 6] {
        [
            self.tmin_c,
            self.tmax_c,
            self.rain_mm,
            self.sun_hours,
            self.wind_kph,
            self.humidity_pct,
        ]
    }

    pub fn value(&self, var: usize) -> f64 {
        self.values()[var]
    }

    pub fn set_value(&mut self, var: usize, v: f64) {
        match var {
            0 => self.tmin_c = v,
            1 => self.tmax_c = v,
            2 => self.rain_mm = v,
            3 => self.sun_hours = v,
            4 => self.wind_kph = v,
            5 => self.humidity_pct = v,
            _ => panic!("weather variable index {var} out of range"),
        }
    }

    pub fn mean_temp(&self) -> f64 {
        (self.tmin_c + self.tmax_c) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSeasonRecord {
    pub field_id: String,
    pub area_ha: f64,
    pub soil_type: Option<String>,
    pub seeding_date: Option<NaiveDate>,
    /// Strictly increasing dates.
    pub weather: Vec<WeatherDay>,
    pub applications: Vec<ApplicationEvent>,
    pub yield_t_ha: Option<f64>,
    /// Set once cleaning has smoothed the weather series.
    #[serde(default)]
    pub weather_smoothed: bool,
}

impl FieldSeasonRecord {
    /// Day offset of `date` from seeding.
    pub fn day_of(&self, date: NaiveDate) -> Option<i32> {
        self.seeding_date.map(|s| (date - s).num_days() as i32)
    }

    pub fn timeline(&self, nutrient: Nutrient) -> NutrientTimeline {
        build_timeline(self, nutrient)
    }

    /// Merged application count for `nutrient`.
    pub fn count(&self, nutrient: Nutrient) -> usize {
        self.timeline(nutrient).entries.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub day: i32,
    pub qty_kg_ha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NutrientTimeline {
    pub nutrient: Nutrient,
    /// Strictly increasing days.
    pub entries: Vec<TimelineEntry>,
    pub total_qty_kg_ha: f64,
    pub expected_yield_t_ha: Option<f64>,
}

impl NutrientTimeline {
    pub fn empty(nutrient: Nutrient) -> Self {
        Self {
            nutrient,
            entries: Vec::new(),
            total_qty_kg_ha: 0.0,
            expected_yield_t_ha: None,
        }
    }

    pub fn count(&self) -> usize {
        self.entries.len()
    }

    /// Merges `(day, qty)` pairs: sorted by day, same-day quantities summed.
    pub fn from_events(nutrient: Nutrient, events: impl IntoIterator<Item = (i32, f64)>) -> Self {
        let mut by_day: BTreeMap<i32, f64> = BTreeMap::new();
        for (day, qty) in events {
            *by_day.entry(day).or_insert(0.0) += qty;
        }
        let entries: Vec<TimelineEntry> = by_day
            .into_iter()
            .map(|(day, qty_kg_ha)| TimelineEntry { day, qty_kg_ha })
            .collect();
        let total_qty_kg_ha = entries.iter().map(|e| e.qty_kg_ha).sum();
        Self {
            nutrient,
            entries,
            total_qty_kg_ha,
            expected_yield_t_ha: None,
        }
    }
}

/// Events for `nutrient`, sorted and merged by day.
pub fn build_timeline(record: &FieldSeasonRecord, nutrient: Nutrient) -> NutrientTimeline {
    let mut t = NutrientTimeline::from_events(
        nutrient,
        record
            .applications
            .iter()
            .filter(|e| e.nutrient == nutrient)
            .map(|e| (e.day, e.qty_kg_ha)),
    );
    t.expected_yield_t_ha = record.yield_t_ha;
    t
}

/// Records whose merged `nutrient` timeline has exactly `k` entries, in order.
pub fn stage2_subset(records: &[FieldSeasonRecord], nutrient: Nutrient, k: usize) -> Vec<&FieldSeasonRecord> {
    records.iter().filter(|r| r.count(nutrient) == k).collect()
}

// ---------------------------------------------------------------------------
// Product composition

/// Product name (trimmed, lowercase) to nutrient mass fractions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProductCompositionTable {
    products: BTreeMap<String, [f64; 8]>,
}

fn product_key(name: &str) -> String {
    name.trim().to_lowercase()
}

impl ProductCompositionTable {
    pub fn insert(&mut self, name: &str, fractions: [f64; 8]) -> Result<()> {
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::InvalidInput(format!("product `{name}`: fraction outside [0, 1]")));
        }
        if fractions.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(Error::InvalidInput(format!("product `{name}`: fractions sum above 1")));
        }
        self.products.insert(product_key(name), fractions);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[f64; 8]> {
        self.products.get(&product_key(name))
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    /// Per-nutrient events for `rate_kg_ha` of `product`; zero fractions emit nothing.
    pub fn split(&self, product: &str, day: i32, rate_kg_ha: f64) -> Option<Vec<ApplicationEvent>> {
        self.get(product).map(|fr| {
            Nutrient::ALL
                .into_iter()
                .zip(fr)
                .filter(|(_, &f)| f > 0.0)
                .map(|(nutrient, &f)| ApplicationEvent {
                    nutrient,
                    day,
                    qty_kg_ha: rate_kg_ha * f,
                })
                .collect()
        })
    }
}

// ---------------------------------------------------------------------------
// CSV loading

pub const FIELDS_HEADER: [&str; 5] = ["field_id", "area_ha", "soil_type", "seeding_date", "yield_t_ha"];
pub const WEATHER_HEADER: [&str; 8] = [
    "field_id",
    "date",
    "tmin_c",
    "tmax_c",
    "rain_mm",
    "sun_hours",
    "wind_kph",
    "humidity_pct",
];
pub const APPLICATIONS_HEADER: [&str; 4] = ["field_id", "date", "product", "rate_kg_ha"];
pub const PRODUCTS_HEADER: [&str; 9] = [
    "product", "n_frac", "p_frac", "k_frac", "s_frac", "mg_frac", "b_frac", "mn_frac", "ca_frac",
];

/// A CSV row with file/line context for error messages.
struct Row<'a> {
    file: &'a Path,
    line: u64,
    columns: &'a HashMap<String, usize>,
    record: csv::StringRecord,
}

impl Row<'_> {
    fn err(&self, column: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.to_path_buf(),
            line: self.line,
            column: column.to_string(),
            message: message.into(),
        }
    }

    fn raw(&self, column: &str) -> Result<&str> {
        let idx = self.columns[column];
        self.record
            .get(idx)
            .map(str::trim)
            .ok_or_else(|| self.err(column, "missing value"))
    }

    fn string(&self, column: &str) -> Result<String> {
        let s = self.raw(column)?;
        if s.is_empty() {
            return Err(self.err(column, "empty value"));
        }
        Ok(s.to_string())
    }

    fn opt_string(&self, column: &str) -> Result<Option<String>> {
        let s = self.raw(column)?;
        Ok((!s.is_empty()).then(|| s.to_string()))
    }

    fn opt_f64(&self, column: &str) -> Result<Option<f64>> {
        let s = self.raw(column)?;
        if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
            return Ok(None);
        }
        let v: f64 = s.parse().map_err(|_| self.err(column, format!("`{s}` is not a number")))?;
        if !v.is_finite() {
            return Err(self.err(column, format!("`{s}` is not finite")));
        }
        Ok(Some(v))
    }

    fn f64(&self, column: &str) -> Result<f64> {
        self.opt_f64(column)?.ok_or_else(|| self.err(column, "empty value"))
    }

    fn opt_date(&self, column: &str) -> Result<Option<NaiveDate>> {
        let s = self.raw(column)?;
        if s.is_empty() {
            return Ok(None);
        }
        NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .map(Some)
            .map_err(|_| self.err(column, format!("`{s}` is not a YYYY-MM-DD date")))
    }

    fn date(&self, column: &str) -> Result<NaiveDate> {
        self.opt_date(column)?.ok_or_else(|| self.err(column, "empty value"))
    }
}

fn read_csv(path: &Path, expected: &[&str], mut on_row: impl FnMut(Row<'_>) -> Result<()>) -> Result<()> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(file);
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let columns: HashMap<String, usize> = headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();
    for col in expected {
        if !columns.contains_key(*col) {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                line: 1,
                column: col.to_string(),
                message: "missing header column".into(),
            });
        }
    }
    for rec in reader.records() {
        let record = rec.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        on_row(Row {
            file: path,
            line,
            columns: &columns,
            record,
        })?;
    }
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        file: path.to_path_buf(),
        line,
        column: String::new(),
        message: e.to_string(),
    }
}

pub fn load_products(path: &Path) -> Result<ProductCompositionTable> {
    let mut table = ProductCompositionTable::default();
    read_csv(path, &PRODUCTS_HEADER, |row| {
        let name = row.string("product")?;
        let mut fr = [0.0; 8];
        for (i, col) in PRODUCTS_HEADER[1..].iter().enumerate() {
            fr[i] = row.f64(col)?;
            if !(0.0..=1.0).contains(&fr[i]) {
                return Err(row.err(col, format!("fraction {} outside [0, 1]", fr[i])));
            }
        }
        table
            .insert(&name, fr)
            .map_err(|_| row.err("product", "fractions sum above 1"))
    })?;
    Ok(table)
}

/// Loads one record per row of `fields_path`, attaching weather and
/// converting product applications into per-nutrient events.
pub fn load_records(
    fields_path: &Path,
    weather_path: &Path,
    applications_path: &Path,
    products_path: &Path,
) -> Result<Vec<FieldSeasonRecord>> {
    let products = load_products(products_path)?;

    let mut records: Vec<FieldSeasonRecord> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    read_csv(fields_path, &FIELDS_HEADER, |row| {
        let field_id = row.string("field_id")?;
        let area_ha = row.f64("area_ha")?;
        if area_ha <= 0.0 {
            return Err(row.err("area_ha", "area must be positive"));
        }
        let yield_t_ha = row.opt_f64("yield_t_ha")?;
        if yield_t_ha.is_some_and(|y| y < 0.0) {
            return Err(row.err("yield_t_ha", "yield must be >= 0"));
        }
        if index.contains_key(&field_id) {
            return Err(row.err("field_id", format!("duplicate field_id `{field_id}`")));
        }
        index.insert(field_id.clone(), records.len());
        records.push(FieldSeasonRecord {
            field_id,
            area_ha,
            soil_type: row.opt_string("soil_type")?,
            seeding_date: row.opt_date("seeding_date")?,
            weather: Vec::new(),
            applications: Vec::new(),
            yield_t_ha,
            weather_smoothed: false,
        });
        Ok(())
    })?;

    // field index -> (date, line)
    let mut weather_lines: Vec<Vec<u64>> = vec![Vec::new(); records.len()];
    read_csv(weather_path, &WEATHER_HEADER, |row| {
        let id = row.string("field_id")?;
        let &i = index.get(&id).ok_or_else(|| Error::UnknownField {
            file: weather_path.to_path_buf(),
            line: row.line,
            field_id: id.clone(),
        })?;
        let mut day = WeatherDay {
            date: row.date("date")?,
            tmin_c: f64::NAN,
            tmax_c: f64::NAN,
            rain_mm: f64::NAN,
            sun_hours: f64::NAN,
            wind_kph: f64::NAN,
            humidity_pct: f64::NAN,
        };
        for (v, col) in WEATHER_VARS.iter().enumerate() {
            day.set_value(v, row.opt_f64(col)?.unwrap_or(f64::NAN));
        }
        records[i].weather.push(day);
        weather_lines[i].push(row.line);
        Ok(())
    })?;
    for (rec, lines) in records.iter_mut().zip(&weather_lines) {
        let mut order: Vec<usize> = (0..rec.weather.len()).collect();
        order.sort_by_key(|&j| rec.weather[j].date);
        for w in order.windows(2) {
            if rec.weather[w[0]].date == rec.weather[w[1]].date {
                return Err(Error::Parse {
                    file: weather_path.to_path_buf(),
                    line: lines[w[1]].max(lines[w[0]]),
                    column: "date".into(),
                    message: format!("duplicate date {} for field `{}`", rec.weather[w[1]].date, rec.field_id),
                });
            }
        }
        rec.weather = order.into_iter().map(|j| rec.weather[j]).collect();
    }

    let mut unknown_products: BTreeSet<String> = BTreeSet::new();
    let mut skipped_no_seeding = 0usize;
    read_csv(applications_path, &APPLICATIONS_HEADER, |row| {
        let id = row.string("field_id")?;
        let &i = index.get(&id).ok_or_else(|| Error::UnknownField {
            file: applications_path.to_path_buf(),
            line: row.line,
            field_id: id.clone(),
        })?;
        let date = row.date("date")?;
        let product = row.string("product")?;
        let rate = row.f64("rate_kg_ha")?;
        if rate < 0.0 {
            return Err(row.err("rate_kg_ha", "rate must be >= 0"));
        }
        let Some(day) = records[i].day_of(date) else {
            skipped_no_seeding += 1;
            return Ok(());
        };
        match products.split(&product, day, rate) {
            Some(events) => records[i].applications.extend(events),
            None => {
                unknown_products.insert(product);
            }
        }
        Ok(())
    })?;
    if !unknown_products.is_empty() {
        return Err(Error::UnknownProduct {
            file: applications_path.to_path_buf(),
            names: unknown_products.into_iter().collect(),
        });
    }
    if skipped_no_seeding > 0 {
        log::warn!("{skipped_no_seeding} application rows skipped: field has no seeding date");
    }
    Ok(records)
}

/// Loads the four standard files from a directory.
pub fn load_dir(dir: &Path) -> Result<Vec<FieldSeasonRecord>> {
    load_records(
        &dir.join("fields.csv"),
        &dir.join("weather.csv"),
        &dir.join("applications.csv"),
        &dir.join("products.csv"),
    )
}

// ---------------------------------------------------------------------------
// Cleaning

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanPolicy {
    /// Fence multiplier for IQR clipping; `None` disables clipping.
    pub iqr_multiplier: Option<f64>,
    /// Centered rolling-mean window; 1 disables smoothing.
    pub smoothing_window: usize,
    pub min_day: i32,
    pub max_day: i32,
}

impl Default for CleanPolicy {
    fn default() -> Self {
        Self {
            iqr_multiplier: Some(1.5),
            smoothing_window: 7,
            min_day: MIN_DAY,
            max_day: MAX_DAY,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CleanReport {
    pub dropped_no_seeding: Vec<String>,
    pub dropped_no_weather: Vec<String>,
    pub applications_out_of_window: usize,
    pub values_imputed: usize,
    pub values_clipped: usize,
}

/// Nearest-rank quartiles: the values at 1-based ranks `ceil(n/4)` and `ceil(3n/4)`.
pub fn quartiles(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let rank = |num: usize| (num * n).div_ceil(4).max(1) - 1;
    Some((v[rank(1)], v[rank(3)]))
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Fills NaN gaps by linear interpolation in time between the nearest known
/// neighbours; leading and trailing gaps take the series median. Returns the
/// number of values filled, or `None` if nothing is known.
pub fn impute_series(days: &[i64], values: &mut [f64]) -> Option<usize> {
    let known: Vec<usize> = (0..values.len()).filter(|&i| !values[i].is_nan()).collect();
    if known.is_empty() {
        return if values.is_empty() { Some(0) } else { None };
    }
    let med = median(&known.iter().map(|&i| values[i]).collect::<Vec<_>>())?;
    let mut filled = 0;
    for i in 0..values.len() {
        if !values[i].is_nan() {
            continue;
        }
        let prev = known.iter().rev().find(|&&k| k < i);
        let next = known.iter().find(|&&k| k > i);
        values[i] = match (prev, next) {
            (Some(&a), Some(&b)) => {
                let t = (days[i] - days[a]) as f64 / (days[b] - days[a]) as f64;
                values[a] + t * (values[b] - values[a])
            }
            _ => med,
        };
        filled += 1;
    }
    Some(filled)
}

/// Centered rolling mean; the window shrinks at the series edges.
pub fn rolling_mean(values: &[f64], window: usize) -> Vec<f64> {
    if window <= 1 {
        return values.to_vec();
    }
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(values.len() - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

pub fn clean(records: &[FieldSeasonRecord], policy: &CleanPolicy) -> Vec<FieldSeasonRecord> {
    clean_with_report(records, policy).0
}

/// Imputes, smooths, clips and filters. Repeating it changes nothing:
/// smoothing runs once per record and clipping uses nearest-rank quartiles,
/// which clipping cannot move.
pub fn clean_with_report(records: &[FieldSeasonRecord], policy: &CleanPolicy) -> (Vec<FieldSeasonRecord>, CleanReport) {
    let mut report = CleanReport::default();
    let mut out: Vec<FieldSeasonRecord> = Vec::with_capacity(records.len());

    for rec in records {
        if rec.seeding_date.is_none() {
            report.dropped_no_seeding.push(rec.field_id.clone());
            continue;
        }
        let mut rec = rec.clone();
        let days: Vec<i64> = rec.weather.iter().map(|w| w.date.num_days_from_ce() as i64).collect();
        let mut ok = !rec.weather.is_empty();
        for var in 0..WEATHER_VARS.len() {
            if !ok {
                break;
            }
            let mut series: Vec<f64> = rec.weather.iter().map(|w| w.value(var)).collect();
            match impute_series(&days, &mut series) {
                Some(n) => {
                    report.values_imputed += n;
                    if !rec.weather_smoothed {
                        series = rolling_mean(&series, policy.smoothing_window);
                    }
                    for (w, v) in rec.weather.iter_mut().zip(series) {
                        w.set_value(var, v);
                    }
                }
                None => ok = false,
            }
        }
        if !ok {
            report.dropped_no_weather.push(rec.field_id.clone());
            continue;
        }
        if policy.smoothing_window > 1 {
            rec.weather_smoothed = true;
        }
        let before = rec.applications.len();
        rec.applications
            .retain(|e| e.day >= policy.min_day && e.day <= policy.max_day);
        report.applications_out_of_window += before - rec.applications.len();
        out.push(rec);
    }

    // missing soil -> global mode, ties to the smallest label
    let mut soil_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &out {
        if let Some(s) = &r.soil_type {
            *soil_counts.entry(s.as_str()).or_default() += 1;
        }
    }
    let mode = soil_counts
        .iter()
        .fold(None::<(&str, usize)>, |best, (&s, &c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((s, c)),
        })
        .map(|(s, _)| s.to_string());
    if let Some(mode) = mode {
        for r in &mut out {
            if r.soil_type.is_none() {
                r.soil_type = Some(mode.clone());
            }
        }
    }

    if let Some(mult) = policy.iqr_multiplier {
        let areas: Vec<f64> = out.iter().map(|r| r.area_ha).collect();
        if let Some((lo, hi)) = fences(&areas, mult) {
            for r in &mut out {
                let c = r.area_ha.clamp(lo, hi);
                if c != r.area_ha {
                    report.values_clipped += 1;
                    r.area_ha = c;
                }
            }
        }
        for var in 0..WEATHER_VARS.len() {
            let pooled: Vec<f64> = out
                .iter()
                .flat_map(|r| r.weather.iter().map(move |w| w.value(var)))
                .collect();
            if let Some((lo, hi)) = fences(&pooled, mult) {
                for r in &mut out {
                    for w in &mut r.weather {
                        let v = w.value(var);
                        let c = v.clamp(lo, hi);
                        if c != v {
                            report.values_clipped += 1;
                            w.set_value(var, c);
                        }
                    }
                }
            }
        }
    }

    if report.applications_out_of_window > 0 {
        log::info!(
            "dropped {} application events outside days [{}, {}]",
            report.applications_out_of_window,
            policy.min_day,
            policy.max_day
        );
    }
    for id in &report.dropped_no_weather {
        log::warn!("record `{id}` dropped: no usable weather data");
    }
    for id in &report.dropped_no_seeding {
        log::warn!("record `{id}` dropped: missing seeding date");
    }
    (out, report)
}

fn fences(values: &[f64], mult: f64) -> Option<(f64, f64)> {
    let (q1, q3) = quartiles(values)?;
    let iqr = q3 - q1;
    Some((q1 - mult * iqr, q3 + mult * iqr))
}

// ---------------------------------------------------------------------------
// Feature encoding

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    OneHot,
}

/// Which columns to build.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    /// Sorted soil labels; one one-hot column each.
    pub soil_vocab: Vec<String>,
    /// When set, add observed season totals of every other nutrient.
    pub co_nutrients_for: Option<Nutrient>,
}

impl FeatureSpec {
    pub fn from_records(records: &[FieldSeasonRecord], co_nutrients_for: Option<Nutrient>) -> Self {
        let vocab: BTreeSet<String> = records.iter().filter_map(|r| r.soil_type.clone()).collect();
        Self {
            soil_vocab: vocab.into_iter().collect(),
            co_nutrients_for,
        }
    }

    pub fn columns(&self) -> (Vec<String>, Vec<ColumnKind>) {
        let mut names = vec!["area_ha".to_string(), "seeding_doy".to_string()];
        let mut kinds = vec![ColumnKind::Numeric, ColumnKind::Numeric];
        for s in &self.soil_vocab {
            names.push(format!("soil={s}"));
            kinds.push(ColumnKind::OneHot);
        }
        for (lo, hi) in WEATHER_WINDOWS {
            for v in ["tmean", "rain", "sun"] {
                names.push(format!("d{lo}_{hi}_{v}"));
                kinds.push(ColumnKind::Numeric);
            }
        }
        if let Some(target) = self.co_nutrients_for {
            for n in Nutrient::ALL.into_iter().filter(|&n| n != target) {
                names.push(format!("total_{}", n.symbol()));
                kinds.push(ColumnKind::Numeric);
            }
        }
        (names, kinds)
    }

    pub fn n_columns(&self) -> usize {
        2 + self.soil_vocab.len() + 3 * WEATHER_WINDOWS.len() + if self.co_nutrients_for.is_some() { 7 } else { 0 }
    }

    /// Feature row for one cleaned record.
    pub fn encode_row(&self, record: &FieldSeasonRecord) -> Result<Vec<f64>> {
        let seeding = record.seeding_date.ok_or_else(|| {
            Error::InvalidInput(format!("record `{}` has no seeding date", record.field_id))
        })?;
        let mut row = Vec::with_capacity(self.n_columns());
        row.push(record.area_ha);
        row.push(seeding.ordinal() as f64);
        for s in &self.soil_vocab {
            row.push(if record.soil_type.as_deref() == Some(s.as_str()) { 1.0 } else { 0.0 });
        }
        row.extend(weather_aggregates(record, seeding));
        if let Some(target) = self.co_nutrients_for {
            for n in Nutrient::ALL.into_iter().filter(|&n| n != target) {
                row.push(record.timeline(n).total_qty_kg_ha);
            }
        }
        if let Some(bad) = row.iter().position(|v| !v.is_finite()) {
            let (names, _) = self.columns();
            return Err(Error::InvalidInput(format!(
                "record `{}`: feature `{}` is not finite",
                record.field_id, names[bad]
            )));
        }
        Ok(row)
    }
}

/// Mean temperature, total rain and total sun per window. An empty window's
/// mean temperature falls back to the mean over all days before it, then to
/// the whole series, then to 0.
fn weather_aggregates(record: &FieldSeasonRecord, seeding: NaiveDate) -> Vec<f64> {
    let dated: Vec<(i32, &WeatherDay)> = record
        .weather
        .iter()
        .map(|w| ((w.date - seeding).num_days() as i32, w))
        .collect();
    let mean_temp = |lo: i32, hi: i32| -> Option<f64> {
        let temps: Vec<f64> = dated
            .iter()
            .filter(|(d, _)| *d >= lo && *d <= hi)
            .map(|(_, w)| w.mean_temp())
            .collect();
        (!temps.is_empty()).then(|| temps.iter().sum::<f64>() / temps.len() as f64)
    };
    let mut out = Vec::with_capacity(3 * WEATHER_WINDOWS.len());
    for (lo, hi) in WEATHER_WINDOWS {
        let tmean = mean_temp(lo, hi)
            .or_else(|| mean_temp(0, lo - 1))
            .or_else(|| mean_temp(i32::MIN, i32::MAX))
            .unwrap_or(0.0);
        let in_window = dated.iter().filter(|(d, _)| *d >= lo && *d <= hi);
        let rain: f64 = in_window.clone().map(|(_, w)| w.rain_mm).sum();
        let sun: f64 = in_window.map(|(_, w)| w.sun_hours).sum();
        out.extend([tmean, rain, sun]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub row_ids: Vec<String>,
    pub columns: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    pub values: Matrix,
}

pub fn encode_features(records: &[FieldSeasonRecord], spec: &FeatureSpec) -> Result<FeatureMatrix> {
    let (columns, kinds) = spec.columns();
    let rows = records
        .iter()
        .map(|r| spec.encode_row(r))
        .collect::<Result<Vec<_>>>()?;
    let values = if rows.is_empty() {
        Matrix::zeros(0, columns.len())
    } else {
        Matrix::from_rows(&rows)?
    };
    Ok(FeatureMatrix {
        row_ids: records.iter().map(|r| r.field_id.clone()).collect(),
        columns,
        kinds,
        values,
    })
}
