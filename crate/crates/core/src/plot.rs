//! Training curves as a self-contained SVG.
//!
//! The left panel draws accuracy against epoch for every evaluation split
//! of every run; the right panel draws the training-split HSIC value.
//! Output is a pure function of the input records.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::train::{read_metrics, MetricsRecord};

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 420.0;
const PANEL_W: f64 = 380.0;
const PANEL_H: f64 = 300.0;
const TOP: f64 = 50.0;
const LEFT: [f64; 2] = [60.0, 540.0];
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub label: String,
    pub records: Vec<MetricsRecord>,
}

/// Label for a metrics file: the enclosing directory for `metrics.csv`,
/// otherwise the file stem.
pub fn run_label(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    if stem == "metrics" {
        if let Some(dir) = path.parent().and_then(Path::file_name).and_then(|s| s.to_str()) {
            return dir.to_string();
        }
    }
    stem.to_string()
}

pub fn load_runs(paths: &[PathBuf]) -> Result<Vec<Run>> {
    paths
        .iter()
        .map(|p| {
            let records = read_metrics(p)?;
            if records.is_empty() {
                return Err(Error::Data(format!("{}: no metrics rows", p.display())));
            }
            Ok(Run {
                label: run_label(p),
                records,
            })
        })
        .collect()
}

fn series(run: &Run, split: Split, value: impl Fn(&MetricsRecord) -> f64) -> Series {
    let mut points: Vec<(f64, f64)> = run
        .records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| (r.epoch as f64, value(r)))
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    Series {
        label: format!("{} {}", run.label, split),
        points,
    }
}

pub fn accuracy_series(runs: &[Run]) -> Vec<Series> {
    runs.iter()
        .flat_map(|run| Split::EVAL.into_iter().map(move |s| series(run, s, |r| r.accuracy)))
        .collect()
}

pub fn hsic_series(runs: &[Run]) -> Vec<Series> {
    runs.iter()
        .map(|run| series(run, Split::Train, |r| r.hsic_value))
        .collect()
}

struct Axes {
    left: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Axes {
    fn px(&self, x: f64) -> f64 {
        self.left + PANEL_W * if self.x_max > 0.0 { x / self.x_max } else { 0.0 }
    }

    fn py(&self, y: f64) -> f64 {
        let span = self.y_max - self.y_min;
        TOP + PANEL_H * (1.0 - if span > 0.0 { (y - self.y_min) / span } else { 0.0 })
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn draw_panel(svg: &mut String, id: &str, title: &str, axes: &Axes, all: &[Series]) {
    let (l, b) = (axes.left, TOP + PANEL_H);
    let _ = writeln!(svg, r#"<g id="{id}">"#);
    let _ = writeln!(
        svg,
        r##"<rect x="{l}" y="{TOP}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#333"/>"##
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="14">{}</text>"#,
        l + PANEL_W / 2.0,
        TOP - 12.0,
        escape(title)
    );
    for i in 0..=4 {
        let y = axes.y_min + (axes.y_max - axes.y_min) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"#,
            l - 4.0,
            axes.py(y) + 3.0,
            format_tick(y)
        );
        let x = axes.x_max * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#,
            axes.px(x),
            b + 14.0,
            format_tick(x)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">epoch</text>"#,
        l + PANEL_W / 2.0,
        b + 30.0
    );
    for (i, s) in all.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", axes.px(x), axes.py(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = b + 48.0 + 14.0 * (i / 2) as f64;
        let lx = l + 190.0 * (i % 2) as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}" font-size="10">{}</text>"#,
            ly - 3.0,
            lx + 16.0,
            ly - 3.0,
            lx + 20.0,
            ly,
            escape(&s.label)
        );
    }
    svg.push_str("</g>\n");
}

fn format_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn x_max(series: &[Series]) -> f64 {
    series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold(0.0, f64::max)
}

/// Render the two panels for `runs`.
pub fn render_svg(runs: &[Run]) -> String {
    let acc = accuracy_series(runs);
    let hsic = hsic_series(runs);
    let legend_rows = acc.len().max(hsic.len()).div_ceil(2);
    let height = HEIGHT + 14.0 * legend_rows as f64;
    let hsic_max = hsic
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let x_acc = x_max(&acc);
    draw_panel(
        &mut svg,
        "accuracy",
        "accuracy",
        &Axes { left: LEFT[0], x_max: x_acc, y_min: 0.0, y_max: 1.0 },
        &acc,
    );
    draw_panel(
        &mut svg,
        "hsic",
        "train HSIC",
        &Axes {
            left: LEFT[1],
            x_max: x_max(&hsic),
            y_min: 0.0,
            y_max: if hsic_max > 0.0 { hsic_max * 1.05 } else { 1.0 },
        },
        &hsic,
    );
    svg.push_str("</svg>\n");
    svg
}

pub fn plot_files(metrics: &[PathBuf], out: impl AsRef<Path>) -> Result<()> {
    if metrics.is_empty() {
        return Err(Error::Config("no metrics files given".into()));
    }
    let runs = load_runs(metrics)?;
    let out = out.as_ref();
    std::fs::write(out, render_svg(&runs)).map_err(|e| Error::io(out, e))
}
