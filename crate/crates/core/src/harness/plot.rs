//! Minimal deterministic SVG line plots from CSV columns.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Clone, Debug, PartialEq)]
pub struct PlotSpec {
    /// Output file name without extension.
    pub name: String,
    pub x: String,
    pub ys: Vec<String>,
}

impl PlotSpec {
    pub fn new(name: &str, x: &str, ys: &[&str]) -> Self {
        Self {
            name: name.into(),
            x: x.into(),
            ys: ys.iter().map(|s| s.to_string()).collect(),
        }
    }
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let header = reader
        .headers()
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            row: i + 1,
            column: String::new(),
            detail: e.to_string(),
        })?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows })
}

impl Table {
    fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    }

    /// `(x, y)` pairs where both cells parse as finite numbers.
    fn series(&self, x: usize, y: usize) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter_map(|r| {
                let xv: f64 = r.get(x)?.parse().ok()?;
                let yv: f64 = r.get(y)?.parse().ok()?;
                (xv.is_finite() && yv.is_finite()).then_some((xv, yv))
            })
            .collect()
    }
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders the SVG text for named series sharing an x column.
pub fn render_svg(x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<String> {
    if let Some((name, _)) = series.iter().find(|(_, pts)| pts.is_empty()) {
        return Err(Error::invalid(format!("series `{name}` has no points")));
    }
    if series.is_empty() {
        return Err(Error::invalid("nothing to plot"));
    }
    let (x0, x1) = span(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let (y0, y1) = span(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN_TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    let _ = writeln!(svg, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<rect x=\"{MARGIN_LEFT}\" y=\"{MARGIN_TOP}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>"
    );
    for (label, v, x, y) in [
        ("x-min", x0, MARGIN_LEFT, HEIGHT - MARGIN_BOTTOM + 16.0),
        ("x-max", x1, WIDTH - MARGIN_RIGHT, HEIGHT - MARGIN_BOTTOM + 16.0),
    ] {
        let _ = writeln!(
            svg,
            "<text class=\"{label}\" x=\"{x:.2}\" y=\"{y:.2}\" font-size=\"11\" text-anchor=\"middle\">{v:.4e}</text>"
        );
    }
    for (label, v, y) in [("y-min", y0, HEIGHT - MARGIN_BOTTOM), ("y-max", y1, MARGIN_TOP)] {
        let _ = writeln!(
            svg,
            "<text class=\"{label}\" x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\">{v:.4e}</text>",
            MARGIN_LEFT - 4.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\">{}</text>",
        MARGIN_LEFT + pw / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{}</text>",
        MARGIN_TOP + ph / 2.0,
        MARGIN_TOP + ph / 2.0,
        escape(&names.join(", "))
    );
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            "<polyline data-series=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            escape(name),
            points.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" fill=\"{color}\">{}</text>",
            MARGIN_LEFT + 8.0,
            MARGIN_TOP + 14.0 * (k as f64 + 1.0),
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Writes one SVG per plot spec next to `out_dir`. Every plot is rendered
/// before any file is written, so a failing spec leaves no partial output.
pub fn emit_svg_plots(csv_path: &Path, specs: &[PlotSpec], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let table = read_table(csv_path)?;
    let mut rendered = Vec::with_capacity(specs.len());
    for spec in specs {
        let xi = table.column(&spec.x)?;
        let mut series = Vec::with_capacity(spec.ys.len());
        for y in &spec.ys {
            let yi = table.column(y)?;
            series.push((y.clone(), table.series(xi, yi)));
        }
        let svg = render_svg(&spec.x, &series)?;
        rendered.push((out_dir.join(format!("{}.svg", spec.name)), svg));
    }
    let mut written = Vec::with_capacity(rendered.len());
    for (path, svg) in rendered {
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
