//! Minimal SVG line charts for the CSV reports (phase accuracy, enemy
//! observation density, training curves).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("column {0:?} not found")]
    Column(String),
    #[error("row {row}: {value:?} in column {column:?} is not a number")]
    Number {
        row: usize,
        column: String,
        value: String,
    },
    #[error("nothing to plot")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Fixed y range; derived from the data when absent.
    pub y_range: Option<(f64, f64)>,
    pub series: Vec<Series>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: [f64; 4] = [40.0, 20.0, 50.0, 60.0]; // top, right, bottom, left
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];
const TICKS: usize = 5;

impl LineChart {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        LineChart {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            y_range: None,
            series: Vec::new(),
        }
    }

    pub fn with_y_range(mut self, lo: f64, hi: f64) -> Self {
        self.y_range = Some((lo, hi));
        self
    }

    fn bounds(&self) -> Option<((f64, f64), (f64, f64))> {
        let pts = self.series.iter().flat_map(|s| &s.points);
        let mut xs = (f64::INFINITY, f64::NEG_INFINITY);
        let mut ys = xs;
        for &(x, y) in pts {
            xs = (xs.0.min(x), xs.1.max(x));
            ys = (ys.0.min(y), ys.1.max(y));
        }
        if !xs.0.is_finite() {
            return None;
        }
        let widen = |(lo, hi): (f64, f64)| {
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, hi + 0.5)
            }
        };
        Some((widen(xs), widen(self.y_range.unwrap_or(ys))))
    }

    pub fn to_svg(&self) -> Result<String, PlotError> {
        let ((x0, x1), (y0, y1)) = self.bounds().ok_or(PlotError::Empty)?;
        let [top, right, bottom, left] = MARGIN;
        let (pw, ph) = (WIDTH - left - right, HEIGHT - top - bottom);
        let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        for i in 0..=TICKS {
            let f = i as f64 / TICKS as f64;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let (px, py) = (sx(xv), sy(yv));
            let _ = writeln!(
                s,
                r##"<line x1="{left}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#e0e0e0"/>"##,
                left + pw
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                left - 6.0,
                py + 4.0,
                tick(yv)
            );
            let _ = writeln!(
                s,
                r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                top + ph + 16.0,
                tick(xv)
            );
        }
        let _ = writeln!(
            s,
            r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            left + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            top + ph / 2.0,
            top + ph / 2.0,
            escape(&self.y_label)
        );
        for (i, series) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<String> = series
                .points
                .iter()
                .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                pts.join(" ")
            );
            for &(x, y) in &series.points {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                    sx(x),
                    sy(y)
                );
            }
            let ly = top + 14.0 + 16.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{ly:.1}" fill="{color}">{}</text>"#,
                left + 10.0,
                escape(&series.name)
            );
        }
        s.push_str("</svg>\n");
        Ok(s)
    }
}

fn tick(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    format!("{r}")
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Reads `(x, y)` series from CSV text. Rows are grouped into one series
/// per distinct value of `group` (one series named `y` when absent); rows
/// with an empty `y` are skipped.
pub fn series_from_csv(
    text: &str,
    x: &str,
    y: &str,
    group: Option<&str>,
) -> Result<Vec<Series>, PlotError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PlotError::Column(name.to_string()))
    };
    let (xi, yi) = (col(x)?, col(y)?);
    let gi = group.map(col).transpose()?;
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    let mut order = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let num = |i: usize, name: &str| {
            let v = rec.get(i).unwrap_or("");
            v.trim().parse::<f64>().map_err(|_| PlotError::Number {
                row: row + 1,
                column: name.to_string(),
                value: v.to_string(),
            })
        };
        if rec.get(yi).is_none_or(|v| v.trim().is_empty()) {
            continue;
        }
        let key = gi.map_or_else(|| y.to_string(), |g| rec.get(g).unwrap_or("").to_string());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups
            .entry(key)
            .or_default()
            .push((num(xi, x)?, num(yi, y)?));
    }
    Ok(order
        .into_iter()
        .map(|name| {
            let points = groups.remove(&name).unwrap_or_default();
            Series { name, points }
        })
        .collect())
}

/// Chart for `phase_accuracy.csv`: accuracy against the middle of each
/// progress quartile.
pub fn phase_accuracy_svg(csv_text: &str, title: &str) -> Result<String, PlotError> {
    let mut series = series_from_csv(csv_text, "lower", "accuracy", None)?;
    for s in &mut series {
        s.name = "accuracy".into();
        for p in &mut s.points {
            p.0 += 0.125;
        }
    }
    let mut chart = LineChart::new(title, "game progress", "accuracy").with_y_range(0.0, 1.0);
    chart.series = series;
    chart.to_svg()
}

/// Chart for `po_density.csv`: observed/total enemy ratio per decile.
pub fn po_density_svg(csv_text: &str, title: &str) -> Result<String, PlotError> {
    let mut series = series_from_csv(csv_text, "lower", "ratio", None)?;
    for s in &mut series {
        s.name = "observed / total enemy".into();
        for p in &mut s.points {
            p.0 += 0.05;
        }
    }
    let mut chart = LineChart::new(title, "game progress", "ratio").with_y_range(0.0, 1.0);
    chart.series = series;
    chart.to_svg()
}

/// Chart for `curves.csv`: one line per split.
pub fn curves_svg(csv_text: &str, metric: &str, title: &str) -> Result<String, PlotError> {
    let mut chart = LineChart::new(title, "epoch", metric);
    if metric == "accuracy" {
        chart = chart.with_y_range(0.0, 1.0);
    }
    chart.series = series_from_csv(csv_text, "epoch", metric, Some("split"))?;
    chart.to_svg()
}

/// Picks the chart for a report file by its header.
pub fn svg_for_csv(csv_text: &str, title: &str) -> Result<String, PlotError> {
    let header = csv_text.lines().next().unwrap_or("");
    if header.starts_with("quartile,") {
        phase_accuracy_svg(csv_text, title)
    } else if header.starts_with("decile,") {
        po_density_svg(csv_text, title)
    } else if header.starts_with("epoch,") {
        curves_svg(csv_text, "accuracy", title)
    } else {
        Err(PlotError::Column("quartile, decile or epoch".into()))
    }
}
