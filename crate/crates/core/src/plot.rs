//! Line charts as standalone SVG 1.1 with a logarithmic y axis.

use std::fmt::Write as _;

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::Mode;
use crate::error::{Error, Result};
use crate::eval::{median, AlphaTable, CellResult, ConvergenceReport};
use crate::trainer::log::read_csv;

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    /// `(x, y)`; points with `y <= 0` or non-finite values are dropped.
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Horizontal reference line `(y, label)`.
    pub rule: Option<(f64, String)>,
}

const W: f64 = 720.0;
const H: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn usable(p: &(f64, f64)) -> bool {
    p.0.is_finite() && p.1.is_finite() && p.1 > 0.0
}

pub fn render_svg(chart: &Chart) -> Result<String> {
    if chart.series.is_empty() {
        return Err(Error::Invalid("chart has no series".into()));
    }
    let pts = || chart.series.iter().flat_map(|s| s.points.iter().filter(|p| usable(p)));
    let mut ys: Vec<f64> = pts().map(|p| p.1).collect();
    if let Some((r, _)) = &chart.rule {
        if r.is_finite() && *r > 0.0 {
            ys.push(*r);
        }
    }
    if ys.is_empty() {
        return Err(Error::Invalid("chart has no positive finite values".into()));
    }
    let xs: Vec<f64> = pts().map(|p| p.0).collect();
    let (mut x0, mut x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min).log10().floor();
    let mut hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max).log10().ceil();
    if hi <= lo {
        hi = lo + 1.0;
    }
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (hi - y.log10()) / (hi - lo) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        escape(&chart.title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black" stroke-width="1"/>"#
    );
    for e in (lo as i64)..=(hi as i64) {
        let y = sy(10f64.powi(e as i32));
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd" stroke-width="1"/>"##,
            LEFT + pw
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">1e{e}</text>"#,
            LEFT - 6.0,
            y + 4.0
        );
    }
    for i in 0..=4 {
        let xv = x0 + (x1 - x0) * i as f64 / 4.0;
        let x = sx(xv);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            TOP + ph + 16.0,
            format_tick(xv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 12.0,
        escape(&chart.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&chart.y_label)
    );
    if let Some((r, label)) = &chart.rule {
        if r.is_finite() && *r > 0.0 {
            let y = sy(*r);
            let _ = writeln!(
                s,
                r#"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black" stroke-width="1" stroke-dasharray="6 4"/>"#,
                LEFT + pw
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11">{}</text>"#,
                LEFT + 4.0,
                y - 4.0,
                escape(label)
            );
        }
    }
    for (k, series) in chart.series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = series
            .points
            .iter()
            .filter(|p| usable(p))
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if !path.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                path.join(" ")
            );
        }
        let ly = TOP + 14.0 + 18.0 * k as f64;
        let lx = W - RIGHT + 14.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&series.name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Per-`images_seen` median over several runs' energy trajectories.
pub fn median_trajectory<'a>(runs: impl IntoIterator<Item = &'a CellResult>) -> Vec<(f64, f64)> {
    let mut at: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in runs {
        for &(i, e) in &r.trajectory {
            at.entry(i).or_default().push(e);
        }
    }
    at.into_iter()
        .filter_map(|(i, v)| median(&v).map(|m| (i as f64, m)))
        .collect()
}

/// One median curve per alpha.
pub fn alpha_chart(table: &AlphaTable) -> Chart {
    let series = table
        .alphas
        .iter()
        .enumerate()
        .map(|(i, a)| Series {
            name: format!("alpha = {a}"),
            points: median_trajectory(table.results.iter().filter(|r| r.cell.index == i)),
        })
        .collect();
    Chart {
        title: "alpha ablation (median over seeds)".into(),
        x_label: "images seen".into(),
        y_label: "energy distance".into(),
        series,
        rule: None,
    }
}

/// One median curve per mode, with the median threshold as a rule line.
pub fn comparison_chart(report: &ConvergenceReport) -> Chart {
    let series = report
        .modes
        .iter()
        .map(|&m: &Mode| Series {
            name: m.as_str().to_string(),
            points: median_trajectory(report.results.iter().filter(|r| r.cell.mode == m)),
        })
        .collect();
    let th: Vec<f64> = report.hits.iter().filter(|h| h.mode == report.modes[0]).map(|h| h.threshold).collect();
    Chart {
        title: "convergence (median over seeds)".into(),
        x_label: "images seen".into(),
        y_label: "energy distance".into(),
        series,
        rule: median(&th).map(|t| (t, format!("threshold {t:.4}"))),
    }
}

/// Energy distance (or Fisher divergence with `fisher`) from several
/// `metrics.csv` files; series are named after the run directories.
pub fn metrics_chart(paths: &[&Path], fisher: bool) -> Result<Chart> {
    let mut series = Vec::new();
    for &p in paths {
        let rows = read_csv(p)?;
        let points = rows
            .iter()
            .filter_map(|r| {
                let v = if fisher { r.fisher } else { r.energy_distance };
                v.map(|v| (r.images_seen as f64, v))
            })
            .collect();
        series.push(Series { name: run_name(p), points });
    }
    Ok(Chart {
        title: "training metrics".into(),
        x_label: "images seen".into(),
        y_label: if fisher { "Fisher divergence" } else { "energy distance" }.into(),
        series,
        rule: None,
    })
}

/// `name` from a sibling `resolved-config.json`, else the directory name.
fn run_name(metrics: &Path) -> String {
    let dir = metrics.parent().unwrap_or(Path::new(""));
    let from_config = std::fs::read_to_string(dir.join(crate::trainer::run::RESOLVED_CONFIG_FILE))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v.get("name").and_then(|n| n.as_str()).map(str::to_string));
    from_config
        .or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| metrics.display().to_string())
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 1e4 {
        format!("{:.0}k", v / 1e3)
    } else if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}
