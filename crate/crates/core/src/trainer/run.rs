//! Full runs: the staged loop, evaluation cadence and artifacts.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::log::{to_csv, MetricRow};
use super::{checkpoint, initial_state, train_iteration, Setup, TrainState};
use crate::checkpoint::{write_atomic, Checkpoint, Header, Role};
use crate::config::{Mode, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{metric_report, MetricReport};
use crate::teacher::Teacher;

pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const GENERATOR_EMA_FILE: &str = "generator-ema.ckpt";
pub const SCORENET_FILE: &str = "scorenet.ckpt";
pub const TEACHER_FILE: &str = "teacher.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub mode: Mode,
    pub seed: u64,
    pub compat_hash: String,
    pub images_seen: u64,
    pub generator_steps: u64,
    pub fake_score_steps: u64,
    /// Metrics of the EMA generator on the full evaluation set.
    pub final_metrics: MetricReport,
    /// Same, for the raw generator parameters.
    pub final_metrics_raw: MetricReport,
    pub final_fisher: Option<f64>,
    /// Zero weight rows skipped by forced normalisation.
    pub norm_skips: usize,
    pub warnings: Vec<String>,
    pub out_dir: PathBuf,
}

impl RunSummary {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SUMMARY_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
    }
}

fn eval_due(start: u64, batch: u64, every: u64) -> bool {
    every > 0 && (start == 0 || start / every > start.saturating_sub(batch) / every)
}

/// Trains into `cfg.resolve_out_dir()`.
pub fn run_training(cfg: &RunConfig) -> Result<RunSummary> {
    let setup = Setup::new(cfg)?;
    run_training_in(&setup, &cfg.resolve_out_dir())
}

/// Trains with a prepared setup into `out_dir`.
pub fn run_training_in(setup: &Setup, out_dir: &Path) -> Result<RunSummary> {
    let cfg = &setup.cfg;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_atomic(&out_dir.join(RESOLVED_CONFIG_FILE), cfg.canonical_json()?.as_bytes())?;
    if let Teacher::Learned(t) = &setup.teacher {
        Checkpoint {
            header: Header {
                compat_hash: setup.compat_hash.clone(),
                images_seen: 0,
                stage_b: 0,
                role: Role::Teacher,
            },
            params: t.params.clone(),
        }
        .save(&out_dir.join(TEACHER_FILE))?;
    }

    let mut warnings = Vec::new();
    if cfg.mode.adversarial() && cfg.loss.lambda_sid == 0.0 {
        warnings.push("lambda_sid = 0 with the adversarial loss on: adversarial-only training".to_string());
    }

    let mut state = initial_state(setup)?;
    let mut rows: Vec<MetricRow> = Vec::new();
    let clock = Instant::now();
    let batch = setup.batch() as u64;
    let every = cfg.train.eval_every;
    let n_during = cfg.eval.n_samples_during;

    let result = (|| -> Result<()> {
        while state.images_seen < cfg.train.budget {
            let start = state.images_seen;
            let (ed, fisher) = if eval_due(start, batch, every) {
                (Some(setup.energy(&state.theta_ema, n_during)?), setup.fisher(&state.theta_ema)?)
            } else {
                (None, None)
            };
            let mut row = train_iteration(setup, &mut state)?;
            row.energy_distance = ed;
            row.fisher = fisher;
            if cfg.train.record_wall_clock {
                row.wall_clock = Some(clock.elapsed().as_secs_f64());
            }
            rows.push(row);
        }
        if !rows.is_empty() && every > 0 {
            rows.push(MetricRow {
                images_seen: state.images_seen,
                stage_b: setup.stage_b(state.images_seen),
                energy_distance: Some(setup.energy(&state.theta_ema, n_during)?),
                fisher: setup.fisher(&state.theta_ema)?,
                wall_clock: cfg.train.record_wall_clock.then(|| clock.elapsed().as_secs_f64()),
                ..Default::default()
            });
        }
        Ok(())
    })();

    write_atomic(&out_dir.join(METRICS_FILE), to_csv(&rows).as_bytes())?;
    save_checkpoints(setup, &state, out_dir)?;
    if let Err(e) = result {
        let diag = serde_json::json!({
            "error": e.to_string(),
            "images_seen": state.images_seen,
            "stage_b": state.stage_b,
            "generator_steps": state.gen_steps,
            "fake_score_steps": state.fake_steps,
        });
        write_atomic(
            &out_dir.join("diagnostics.json"),
            serde_json::to_string_pretty(&diag).expect("json").as_bytes(),
        )?;
        return Err(e);
    }

    let n = cfg.eval.n_samples;
    let real = setup.eval_real(n)?;
    let final_metrics = metric_report(&setup.generate_eval(&state.theta_ema, n)?, &real, cfg.eval.seed)?;
    let final_metrics_raw = metric_report(&setup.generate_eval(&state.theta, n)?, &real, cfg.eval.seed)?;
    let summary = RunSummary {
        name: cfg.name.clone(),
        mode: cfg.mode,
        seed: cfg.seed,
        compat_hash: setup.compat_hash.clone(),
        images_seen: state.images_seen,
        generator_steps: state.gen_steps,
        fake_score_steps: state.fake_steps,
        final_metrics,
        final_metrics_raw,
        final_fisher: setup.fisher(&state.theta_ema)?,
        norm_skips: state.norm_skips,
        warnings,
        out_dir: out_dir.to_path_buf(),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Invalid(e.to_string()))?;
    write_atomic(&out_dir.join(SUMMARY_FILE), json.as_bytes())?;
    Ok(summary)
}

fn save_checkpoints(setup: &Setup, state: &TrainState, dir: &Path) -> Result<()> {
    checkpoint(setup, state, &state.theta, Role::Generator).save(&dir.join(GENERATOR_FILE))?;
    checkpoint(setup, state, &state.theta_ema, Role::GeneratorEma).save(&dir.join(GENERATOR_EMA_FILE))?;
    checkpoint(setup, state, &state.psi, Role::FakeScore).save(&dir.join(SCORENET_FILE))
}
