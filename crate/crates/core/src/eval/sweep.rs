//! Multi-run experiments: the alpha ablation and the SiD / SiDA / SiD²A
//! convergence comparison.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::config::{Mode, RunConfig};
use crate::error::{Error, Result};
use crate::trainer::log::{energy_trajectory, read_csv};
use crate::trainer::{run_training, RunSummary};

/// One run of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mode: Mode,
    pub alpha: f64,
    pub seed: u64,
    /// Position in the requested list, so duplicates stay distinct.
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub dir: PathBuf,
    pub summary: Option<RunSummary>,
    /// `(images_seen, energy_distance)` of the EMA generator.
    pub trajectory: Vec<(u64, f64)>,
    pub error: Option<String>,
}

impl CellResult {
    pub fn final_energy(&self) -> Option<f64> {
        self.summary.as_ref().map(|s| s.final_metrics.energy_distance)
    }

    /// Last logged (not full-set) energy distance.
    pub fn last_logged(&self) -> Option<f64> {
        self.trajectory.last().map(|t| t.1)
    }
}

fn cell_dir(root: &Path, c: &Cell) -> PathBuf {
    root.join(format!("{}-a{}-{}-s{}", c.mode.as_str(), c.index, c.alpha, c.seed))
}

fn cell_config(base: &RunConfig, c: &Cell, dir: &Path) -> RunConfig {
    let mut cfg = base.clone();
    cfg.mode = c.mode;
    cfg.seed = c.seed;
    cfg.loss.alpha = c.alpha;
    cfg.name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    cfg.out_dir = Some(dir.to_path_buf());
    cfg
}

fn run_cell(cfg: &RunConfig, cell: Cell, dir: PathBuf) -> CellResult {
    let out = run_training(cfg).and_then(|s| {
        let rows = read_csv(&dir.join("metrics.csv"))?;
        Ok((s, energy_trajectory(&rows)))
    });
    match out {
        Ok((s, t)) => CellResult { cell, dir, summary: Some(s), trajectory: t, error: None },
        Err(e) => CellResult { cell, dir, summary: None, trajectory: vec![], error: Some(e.to_string()) },
    }
}

/// Runs each `(cell, config)` pair on up to `workers` threads. Errors are
/// recorded per cell. Results come back in input order.
pub fn run_cells(jobs: Vec<(Cell, RunConfig)>, workers: usize) -> Vec<CellResult> {
    let n = jobs.len();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; n]);
    let workers = workers.clamp(1, n.max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let (cell, cfg) = &jobs[i];
                let dir = cfg.resolve_out_dir();
                let r = run_cell(cfg, cell.clone(), dir);
                slots.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("workers joined").into_iter().map(|r| r.expect("every job ran")).collect()
}

fn sort_results(results: &mut [CellResult]) {
    results.sort_by(|a, b| {
        let (x, y) = (&a.cell, &b.cell);
        x.mode
            .as_str()
            .cmp(y.mode.as_str())
            .then(x.alpha.total_cmp(&y.alpha))
            .then(x.index.cmp(&y.index))
            .then(x.seed.cmp(&y.seed))
    });
}

/// Same configuration, varying only `alpha`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaTable {
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub results: Vec<CellResult>,
}

impl AlphaTable {
    /// Median final energy distance over seeds for each requested alpha.
    pub fn medians(&self) -> Vec<(f64, Option<f64>)> {
        self.alphas
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let v: Vec<f64> = self
                    .results
                    .iter()
                    .filter(|r| r.cell.index == i)
                    .filter_map(CellResult::final_energy)
                    .collect();
                (a, median(&v))
            })
            .collect()
    }
}

pub fn ablate_alpha(base: &RunConfig, alphas: &[f64], seeds: &[u64], root: &Path, workers: usize) -> Result<AlphaTable> {
    if alphas.is_empty() {
        return Err(Error::config("sweep.alphas", "at least one alpha is required"));
    }
    if seeds.is_empty() {
        return Err(Error::config("sweep.seeds", "at least one seed is required"));
    }
    base.validate()?;
    let mut jobs = Vec::new();
    for (index, &alpha) in alphas.iter().enumerate() {
        for &seed in seeds {
            let cell = Cell { mode: base.mode, alpha, seed, index };
            let dir = cell_dir(root, &cell);
            jobs.push((cell.clone(), cell_config(base, &cell, &dir)));
        }
    }
    let mut results = run_cells(jobs, workers);
    sort_results(&mut results);
    let table = AlphaTable { alphas: alphas.to_vec(), seeds: seeds.to_vec(), results };
    write_results(root, "ablation", &table.results, &table)?;
    Ok(table)
}

/// Samples-to-threshold for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdHit {
    pub mode: Mode,
    pub seed: u64,
    pub threshold: f64,
    /// `images_seen` of the first evaluation at or below the threshold.
    pub images_seen: Option<u64>,
    /// The same, counted from the first generator step.
    pub generator_samples: Option<u64>,
    /// Logged metric at the first evaluation.
    pub initial: Option<f64>,
    /// Logged metric at the last evaluation.
    pub last: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub hits: Vec<ThresholdHit>,
    /// Per seed: SiDA generator samples to reach the threshold divided by the
    /// generator samples SiD trained for. `None` when not reached.
    pub sida_over_sid: Vec<Option<f64>>,
    pub median_ratio: Option<f64>,
    pub results: Vec<CellResult>,
}

impl ConvergenceReport {
    pub fn hit(&self, mode: Mode, seed: u64) -> Option<&ThresholdHit> {
        self.hits.iter().find(|h| h.mode == mode && h.seed == seed)
    }

    pub fn result(&self, mode: Mode, seed: u64) -> Option<&CellResult> {
        self.results.iter().find(|r| r.cell.mode == mode && r.cell.seed == seed)
    }
}

/// First trajectory point at or below `threshold`.
pub fn first_below(trajectory: &[(u64, f64)], threshold: f64) -> Option<u64> {
    trajectory.iter().find(|(_, e)| *e <= threshold).map(|(i, _)| *i)
}

/// Runs every mode for every seed. SiD runs first, since SiD²A starts from
/// the SiD run's EMA generator. With no `threshold`, each seed uses its SiD
/// run's last logged metric.
pub fn compare_convergence(
    base: &RunConfig,
    modes: &[Mode],
    seeds: &[u64],
    threshold: Option<f64>,
    root: &Path,
    workers: usize,
) -> Result<ConvergenceReport> {
    if modes.is_empty() {
        return Err(Error::config("sweep.modes", "at least one mode is required"));
    }
    if seeds.is_empty() {
        return Err(Error::config("sweep.seeds", "at least one seed is required"));
    }
    let needs_sid = modes.contains(&Mode::Sid2a) || (threshold.is_none() && modes.iter().any(|&m| m != Mode::Sid));
    let mut first: Vec<Mode> = vec![];
    if needs_sid || modes.contains(&Mode::Sid) {
        first.push(Mode::Sid);
    }
    let mut base = base.clone();
    base.train.sid_checkpoint = None;
    base.mode = Mode::Sid;
    base.validate()?;

    let job = |mode: Mode, seed: u64, sid_dir: Option<PathBuf>| {
        let cell = Cell { mode, alpha: base.loss.alpha, seed, index: 0 };
        let dir = cell_dir(root, &cell);
        let mut cfg = cell_config(&base, &cell, &dir);
        cfg.train.sid_checkpoint = sid_dir.map(|d| std::path::absolute(&d).unwrap_or(d).join("generator-ema.ckpt"));
        (cell, cfg)
    };

    let mut results = run_cells(first.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).map(|(m, s)| job(m, s, None)).collect(), workers);
    let sid_dir = |seed: u64| {
        results
            .iter()
            .find(|r| r.cell.mode == Mode::Sid && r.cell.seed == seed)
            .map(|r| r.dir.clone())
    };
    let rest: Vec<(Cell, RunConfig)> = modes
        .iter()
        .filter(|&&m| m != Mode::Sid)
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .map(|(m, s)| job(m, s, if m == Mode::Sid2a { sid_dir(s) } else { None }))
        .collect();
    results.extend(run_cells(rest, workers));
    results.retain(|r| modes.contains(&r.cell.mode));
    sort_results(&mut results);

    let n1 = base.train.n1;
    let mut hits = Vec::new();
    for r in &results {
        let th = match threshold {
            Some(t) => t,
            None => match results
                .iter()
                .find(|x| x.cell.mode == Mode::Sid && x.cell.seed == r.cell.seed)
                .and_then(CellResult::last_logged)
            {
                Some(t) => t,
                None => continue,
            },
        };
        let at = first_below(&r.trajectory, th);
        hits.push(ThresholdHit {
            mode: r.cell.mode,
            seed: r.cell.seed,
            threshold: th,
            images_seen: at,
            generator_samples: at.map(|i| i.saturating_sub(n1)),
            initial: r.trajectory.first().map(|t| t.1),
            last: r.last_logged(),
        });
    }
    let sida_over_sid: Vec<Option<f64>> = seeds
        .iter()
        .map(|&s| {
            let sida = hits.iter().find(|h| h.mode == Mode::Sida && h.seed == s)?;
            let sid = results.iter().find(|r| r.cell.mode == Mode::Sid && r.cell.seed == s)?;
            let used = sid.summary.as_ref()?.images_seen.saturating_sub(n1).max(1);
            Some(sida.generator_samples? as f64 / used as f64)
        })
        .collect();
    let ratios: Vec<f64> = sida_over_sid.iter().map(|r| r.unwrap_or(f64::INFINITY)).collect();
    let median_ratio = if sida_over_sid.iter().all(Option::is_none) { None } else { median(&ratios) };
    let report = ConvergenceReport {
        modes: modes.to_vec(),
        seeds: seeds.to_vec(),
        hits,
        sida_over_sid,
        median_ratio,
        results,
    };
    write_results(root, "comparison", &report.results, &report)?;
    Ok(report)
}

/// Median of the finite-or-infinite values; `None` when empty.
pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// `results.csv`, `trajectories.csv` and `<stem>.json` under `root`.
fn write_results<T: Serialize>(root: &Path, stem: &str, results: &[CellResult], summary: &T) -> Result<()> {
    let mut table = String::from("mode,alpha,seed,final_energy_distance,final_sliced_wasserstein,final_frechet_feature_distance,images_seen,error\n");
    let mut traj = String::from("mode,alpha,seed,images_seen,energy_distance\n");
    for r in results {
        let c = &r.cell;
        let s = r.summary.as_ref();
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{}",
            c.mode.as_str(),
            c.alpha,
            c.seed,
            fmt_opt(s.map(|s| s.final_metrics.energy_distance)),
            fmt_opt(s.map(|s| s.final_metrics.sliced_wasserstein)),
            fmt_opt(s.map(|s| s.final_metrics.frechet_feature_distance)),
            s.map(|s| s.images_seen.to_string()).unwrap_or_default(),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        );
        for (i, e) in &r.trajectory {
            let _ = writeln!(traj, "{},{},{},{},{}", c.mode.as_str(), c.alpha, c.seed, i, e);
        }
    }
    write_atomic(&root.join(format!("{stem}-results.csv")), table.as_bytes())?;
    write_atomic(&root.join(format!("{stem}-trajectories.csv")), traj.as_bytes())?;
    let json = serde_json::to_string_pretty(summary).map_err(|e| Error::Invalid(e.to_string()))?;
    write_atomic(&root.join(format!("{stem}.json")), json.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_threshold_helpers() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[1.0, 4.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        let t = [(0, 0.5), (100, 0.3), (200, 0.1)];
        assert_eq!(first_below(&t, 0.3), Some(100));
        assert_eq!(first_below(&t, f64::INFINITY), Some(0));
        assert_eq!(first_below(&t, 0.0), None);
    }

    #[test]
    fn empty_sweeps_rejected() {
        let cfg = RunConfig::from_toml_str("[data]\npreset = \"ring-8\"\n").unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(ablate_alpha(&cfg, &[], &[0], dir.path(), 1).is_err());
        assert!(compare_convergence(&cfg, &[], &[0], None, dir.path(), 1).is_err());
    }
}
