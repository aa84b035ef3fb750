//! Timeline bar charts written as plain SVG text.
//!
//! Each chart places one bar per application (height = quantity) on a season
//! day axis, with a dashed marker at each application day. Bars and markers
//! carry `data-day` / `data-qty` attributes so tests can read the chart back
//! without a renderer.

use std::fmt::Write as _;

use agritime::dataset::{Nutrient, MAX_DAY, MIN_DAY};

use crate::NutrientSchedule;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 60.0;
const BAR_WIDTH: f64 = 14.0;

pub fn file_name(nutrient: Nutrient) -> String {
    format!("schedule_{}.svg", nutrient.symbol())
}

fn x_of(day: f64) -> f64 {
    let span = (MAX_DAY - MIN_DAY) as f64;
    LEFT + (day - MIN_DAY as f64) / span * (WIDTH - LEFT - RIGHT)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Round y-axis maximum at or above `v`.
fn nice_max(v: f64) -> f64 {
    if v <= 0.0 {
        return 1.0;
    }
    let mag = 10f64.powf(v.log10().floor());
    for step in [1.0, 2.0, 2.5, 5.0, 10.0] {
        if step * mag >= v {
            return step * mag;
        }
    }
    10.0 * mag
}

pub fn render(field_id: &str, n: &NutrientSchedule) -> String {
    let plot_h = HEIGHT - TOP - BOTTOM;
    let base_y = TOP + plot_h;
    let y_max = nice_max(n.entries.iter().map(|e| e.qty_kg_ha).fold(0.0, f64::max));
    let y_of = |q: f64| base_y - q / y_max * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" data-nutrient="{}" data-field="{}">"#,
        n.nutrient.symbol(),
        escape(field_id)
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text class="title" x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{} application timeline, field {}</text>"#,
        WIDTH / 2.0,
        n.name,
        escape(field_id)
    );

    // Axes with ticks every 30 days and five quantity gridlines.
    let _ = writeln!(
        s,
        r##"<line class="axis" x1="{LEFT}" y1="{base_y}" x2="{}" y2="{base_y}" stroke="#333"/>"##,
        WIDTH - RIGHT
    );
    let _ = writeln!(s, r##"<line class="axis" x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{base_y}" stroke="#333"/>"##);
    for day in (0..=MAX_DAY).step_by(30) {
        let x = x_of(day as f64);
        let _ = writeln!(
            s,
            r##"<text class="tick" x="{x:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="10" fill="#333">{day}</text>"##,
            base_y + 14.0
        );
    }
    for i in 0..=5 {
        let q = y_max * i as f64 / 5.0;
        let y = y_of(q);
        let _ = writeln!(
            s,
            r##"<line class="grid" x1="{LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ddd"/><text class="tick" x="{}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="10" fill="#333">{q}</text>"##,
            WIDTH - RIGHT,
            LEFT - 6.0,
            y + 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">days after seeding</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        HEIGHT - 22.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle" font-family="sans-serif" font-size="12">kg/ha</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );

    for (i, e) in n.entries.iter().enumerate() {
        let x = x_of(e.day as f64);
        let y = y_of(e.qty_kg_ha);
        let _ = writeln!(
            s,
            r##"<line class="day-marker" data-index="{}" data-day="{}" x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{base_y}" stroke="#888" stroke-dasharray="4 3"/>"##,
            i + 1,
            e.day
        );
        let _ = writeln!(
            s,
            r##"<rect class="bar" data-index="{}" data-day="{}" data-qty="{}" x="{:.2}" y="{y:.2}" width="{BAR_WIDTH}" height="{:.2}" fill="#2e7d32"/>"##,
            i + 1,
            e.day,
            e.qty_kg_ha,
            x - BAR_WIDTH / 2.0,
            base_y - y
        );
        let _ = writeln!(
            s,
            r#"<text class="bar-label" x="{x:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="11">{:.1} kg/ha, day {}</text>"#,
            y - 6.0,
            e.qty_kg_ha,
            e.day
        );
    }

    let yield_text = n
        .expected_yield_t_ha
        .map(|y| format!(", expected yield {y:.2} t/ha"))
        .unwrap_or_default();
    let _ = writeln!(
        s,
        r#"<text class="total" data-total="{}" x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="12">Total {}: {:.1} kg/ha in {} applications{}</text>"#,
        n.total_qty_kg_ha,
        WIDTH - RIGHT,
        TOP - 8.0,
        n.nutrient.symbol(),
        n.total_qty_kg_ha,
        n.entries.len(),
        yield_text
    );
    s.push_str("</svg>\n");
    s
}
