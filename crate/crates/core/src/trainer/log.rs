//! Metric log: one CSV row per iteration plus a final evaluation row.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const COLUMNS: [&str; 9] = [
    "images_seen",
    "stage_b",
    "loss_sid",
    "loss_adv_gen",
    "loss_denoise",
    "loss_disc",
    "energy_distance",
    "fisher_divergence_if_available",
    "wall_clock",
];

/// One log row. Empty cells are `None`. Loss values are per-sample
/// averages of the batch-sum losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricRow {
    /// Counter at the start of the iteration.
    pub images_seen: u64,
    pub stage_b: u8,
    /// Present iff a generator step ran.
    pub loss_sid: Option<f64>,
    pub loss_adv_gen: Option<f64>,
    pub loss_denoise: Option<f64>,
    /// Present iff the discriminator term was active in the fake-score step.
    pub loss_disc: Option<f64>,
    pub energy_distance: Option<f64>,
    pub fisher: Option<f64>,
    pub wall_clock: Option<f64>,
}

impl MetricRow {
    pub fn generator_stepped(&self) -> bool {
        self.loss_sid.is_some()
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn to_csv(rows: &[MetricRow]) -> String {
    let mut s = COLUMNS.join(",");
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.images_seen,
            r.stage_b,
            cell(r.loss_sid),
            cell(r.loss_adv_gen),
            cell(r.loss_denoise),
            cell(r.loss_disc),
            cell(r.energy_distance),
            cell(r.fisher),
            cell(r.wall_clock),
        );
    }
    s
}

fn parse_cell(s: &str, line: usize, col: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::config(col.to_string(), format!("line {line}: `{s}` is not a number")))
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::config("metrics.csv", "empty file"))?;
    if header != COLUMNS.join(",") {
        return Err(Error::config("metrics.csv", format!("unexpected header `{header}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != COLUMNS.len() {
            return Err(Error::config("metrics.csv", format!("line {}: expected {} fields", i + 2, COLUMNS.len())));
        }
        let n = i + 2;
        rows.push(MetricRow {
            images_seen: f[0]
                .parse()
                .map_err(|_| Error::config("images_seen", format!("line {n}: bad integer")))?,
            stage_b: f[1]
                .parse()
                .map_err(|_| Error::config("stage_b", format!("line {n}: bad integer")))?,
            loss_sid: parse_cell(f[2], n, COLUMNS[2])?,
            loss_adv_gen: parse_cell(f[3], n, COLUMNS[3])?,
            loss_denoise: parse_cell(f[4], n, COLUMNS[4])?,
            loss_disc: parse_cell(f[5], n, COLUMNS[5])?,
            energy_distance: parse_cell(f[6], n, COLUMNS[6])?,
            fisher: parse_cell(f[7], n, COLUMNS[7])?,
            wall_clock: parse_cell(f[8], n, COLUMNS[8])?,
        });
    }
    Ok(rows)
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

/// Violations of the stage contract found in a log: generator steps before
/// `n1`, or a nonzero adversarial contribution at or before `n2`.
pub fn stage_violations(rows: &[MetricRow], n1: u64, n2: u64) -> Vec<String> {
    let mut out = Vec::new();
    for r in rows {
        if r.images_seen < n1 && r.generator_stepped() {
            out.push(format!("generator step at images_seen={}", r.images_seen));
        }
        if r.images_seen <= n2 {
            if r.stage_b != 0 {
                out.push(format!("stage_b=1 at images_seen={}", r.images_seen));
            }
            if r.loss_adv_gen.is_some_and(|v| v != 0.0) {
                out.push(format!("adversarial generator loss at images_seen={}", r.images_seen));
            }
            if r.loss_disc.is_some() {
                out.push(format!("discriminator loss at images_seen={}", r.images_seen));
            }
        }
    }
    out
}

/// `(images_seen, energy_distance)` for every evaluated row.
pub fn energy_trajectory(rows: &[MetricRow]) -> Vec<(u64, f64)> {
    rows.iter()
        .filter_map(|r| r.energy_distance.map(|e| (r.images_seen, e)))
        .collect()
}
