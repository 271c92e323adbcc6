//! Run configuration: TOML in, canonical JSON out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytic::MixtureModel;
use crate::error::{Error, Result};
use crate::losses::{LogvarForm, LossWeights};
use crate::nets::{DataShape, ForcedNorm, GeneratorKind};
use crate::optim::AdamConfig;
use crate::schedule::ScheduleConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Pure SiD: stage 3 behaves like stage 2.
    Sid,
    Sida,
    /// SiDA warm-started from a SiD generator.
    Sid2a,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Sid => "sid",
            Mode::Sida => "sida",
            Mode::Sid2a => "sid2a",
        }
    }

    pub fn adversarial(self) -> bool {
        self != Mode::Sid
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sid" => Ok(Mode::Sid),
            "sida" => Ok(Mode::Sida),
            "sid2a" => Ok(Mode::Sid2a),
            _ => Err(Error::config("mode", format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub preset: Option<String>,
    pub weights: Option<Vec<f64>>,
    pub means: Option<Vec<Vec<f64>>>,
    pub variances: Option<Vec<Vec<f64>>>,
    /// `[c, h, w]` for grid data; vector data when absent.
    pub grid: Option<[usize; 3]>,
}

impl DataConfig {
    pub fn model(&self) -> Result<MixtureModel> {
        match (&self.preset, &self.weights, &self.means, &self.variances) {
            (Some(p), None, None, None) => MixtureModel::preset(p),
            (None, Some(w), Some(m), Some(v)) => MixtureModel::new(w.clone(), m.clone(), v.clone()),
            (None, None, None, None) => Err(Error::config("data", "a preset or weights/means/variances is required")),
            _ => Err(Error::config(
                "data",
                "give either a preset or all of weights, means and variances",
            )),
        }
    }

    pub fn shape(&self, dim: usize) -> Result<DataShape> {
        match self.grid {
            None => Ok(DataShape::Vector(dim)),
            Some([c, h, w]) if c * h * w == dim => Ok(DataShape::Grid { c, h, w }),
            Some(_) => Err(Error::config("data.grid", "grid extents do not match the data dimension")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherMode {
    Exact,
    Corrupted,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub mode: TeacherMode,
    /// Corruption strength for `corrupted`.
    pub strength: f64,
    /// Seed of the corruption draw, independent of the run seed.
    pub seed: u64,
    /// Pretraining samples for `learned`.
    pub budget: usize,
    pub lr: f64,
    pub batch: usize,
    /// Load a learned teacher instead of training one.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            mode: TeacherMode::Exact,
            strength: 0.0,
            seed: 0,
            budget: 200_000,
            lr: 3e-3,
            batch: 128,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetsConfig {
    pub generator: GeneratorKind,
    pub gen_width: usize,
    /// Residual coefficient of the generator; when absent, the skip
    /// coefficient `sigma_data^2 / (sigma_init^2 + sigma_data^2)` of a
    /// preconditioned denoiser at `sigma_init`.
    pub gen_skip: Option<f64>,
    pub score_width: usize,
    pub sigma_data: f64,
    pub forced_norm: ForcedNorm,
    /// Logvar head; on by default exactly when forced normalisation is on.
    pub logvar: Option<bool>,
    pub logvar_form: LogvarForm,
}

impl Default for NetsConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorKind::Mlp,
            gen_width: 128,
            gen_skip: None,
            score_width: 128,
            sigma_data: 0.5,
            forced_norm: ForcedNorm::Off,
            logvar: None,
            logvar_form: LogvarForm::Canonical,
        }
    }
}

impl NetsConfig {
    pub fn logvar_enabled(&self) -> bool {
        self.logvar.unwrap_or(self.forced_norm != ForcedNorm::Off)
    }
}

/// When the fake-score network's discriminator term switches on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FakeAdvStart {
    /// Together with the generator's adversarial term (`b = 1`).
    #[default]
    Stage3,
    /// From the first fake-score step.
    Always,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub lambda_sid: f64,
    pub lambda_adv_gen: f64,
    pub lambda_adv_fake: f64,
    pub pool_group: usize,
    pub fake_adv_start: FakeAdvStart,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            alpha: w.alpha,
            lambda_sid: w.lambda_sid,
            lambda_adv_gen: w.lambda_adv_gen,
            lambda_adv_fake: w.lambda_adv_fake,
            pool_group: w.pool_group,
            fake_adv_start: FakeAdvStart::Stage3,
        }
    }
}

impl LossConfig {
    pub fn weights(&self, pixel_count: usize) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            lambda_sid: self.lambda_sid,
            lambda_adv_gen: self.lambda_adv_gen,
            lambda_adv_fake: self.lambda_adv_fake,
            stage_b: 0,
            pool_group: self.pool_group,
            pixel_count,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch: usize,
    /// Samples of fake-score-only training.
    pub n1: u64,
    /// Samples after which the adversarial stage begins.
    pub n2: u64,
    /// Total samples.
    pub budget: u64,
    pub lr_gen: f64,
    pub lr_fake: f64,
    pub adam: AdamConfig,
    pub ema_decay: f64,
    /// Fake-score updates per generator update.
    pub fake_steps: usize,
    /// Regression steps fitting the fake-score network to the teacher
    /// before training.
    pub prefit_steps: usize,
    pub prefit_lr: f64,
    /// Evaluate every this many samples (0 disables intermediate evaluation).
    pub eval_every: u64,
    pub record_wall_clock: bool,
    /// Source generator checkpoint for `sid2a`.
    pub sid_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            n1: 10_000,
            n2: 20_000,
            budget: 200_000,
            lr_gen: 1e-4,
            lr_fake: 1e-4,
            adam: AdamConfig::default(),
            ema_decay: 0.999,
            fake_steps: 1,
            prefit_steps: 1000,
            prefit_lr: 3e-3,
            eval_every: 10_000,
            record_wall_clock: false,
            sid_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Samples per set for reported metrics.
    pub n_samples: usize,
    /// Samples per set for intermediate evaluations.
    pub n_samples_during: usize,
    /// Seed of the evaluation latents, real set and featurizer.
    pub seed: u64,
    /// Noise level at which the exact Fisher divergence is logged.
    pub fisher_sigma: f64,
    pub fisher_mc: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            n_samples_during: 2_000,
            seed: 12_345,
            fisher_sigma: 1.0,
            fisher_mc: 2_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    /// Metric threshold for convergence comparisons; the SiD run's final
    /// metric when absent.
    pub threshold: Option<f64>,
    /// Parallel runs.
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub mode: Mode,
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub schedule: ScheduleConfig,
    pub nets: NetsConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            mode: Mode::Sida,
            out_dir: None,
            data: DataConfig::default(),
            teacher: TeacherConfig::default(),
            schedule: ScheduleConfig::default(),
            nets: NetsConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn from_toml_error(e: toml::de::Error) -> Error {
    // toml reports the offending key inside the message
    let msg = e.message().to_string();
    let key = msg
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "config".into());
    Error::config(key, msg)
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(from_toml_error)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    /// Applies `section.key=value` overrides, with `value` in TOML syntax
    /// (bare words are taken as strings).
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(self).map_err(|e| Error::config("config", e.to_string()))?;
        for ov in overrides {
            let (path, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::config(ov.clone(), "override must look like key=value"))?;
            let parsed = parse_toml_value(raw);
            let mut cur = &mut value;
            let parts: Vec<&str> = path.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = cur
                    .as_table_mut()
                    .ok_or_else(|| Error::config(path, "not a table"))?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), parsed.clone());
                    break;
                }
                cur = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()));
            }
            // report the full dotted key of the first bad override
            if let Err(Error::Config { reason, .. }) = Self::from_value(&value) {
                return Err(Error::config(path, reason));
            }
        }
        Self::from_value(&value)
    }

    fn from_value(value: &toml::Value) -> Result<Self> {
        let s = toml::to_string(value).map_err(|e| Error::config("config", e.to_string()))?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.data.model()?;
        let shape = self.data.shape(model.dim())?;
        crate::schedule::NoiseSchedule::new(self.schedule.clone())?;
        self.loss.weights(shape.numel()).validate()?;
        let t = &self.train;
        if t.batch == 0 {
            return Err(Error::config("train.batch", "must be positive"));
        }
        if t.batch % self.loss.pool_group != 0 {
            return Err(Error::config(
                "loss.pool_group",
                format!("batch {} is not divisible by pool_group {}", t.batch, self.loss.pool_group),
            ));
        }
        if !(t.n1 < t.n2) {
            return Err(Error::config("train.n1", "n1 must be below n2"));
        }
        if !(t.lr_gen > 0.0) || !(t.lr_fake > 0.0) || !(t.prefit_lr > 0.0) {
            return Err(Error::config("train.lr_gen", "learning rates must be positive"));
        }
        if t.fake_steps == 0 {
            return Err(Error::config("train.fake_steps", "must be positive"));
        }
        if !(0.0..1.0).contains(&t.ema_decay) {
            return Err(Error::config("train.ema_decay", "must lie in [0, 1)"));
        }
        if self.mode == Mode::Sid2a && t.sid_checkpoint.is_none() {
            return Err(Error::config("train.sid_checkpoint", "mode sid2a needs a SiD generator checkpoint"));
        }
        if self.mode.adversarial() && self.nets.forced_norm == ForcedNorm::InPlace {
            return Err(Error::config(
                "nets.forced_norm",
                "in-place forced normalisation cannot be combined with the adversarial loss; use pre-hook",
            ));
        }
        if self.nets.generator == GeneratorKind::Linear && matches!(shape, DataShape::Grid { .. }) {
            return Err(Error::config("nets.generator", "linear generator needs vector data"));
        }
        if self.teacher.mode == TeacherMode::Corrupted && !(self.teacher.strength >= 0.0) {
            return Err(Error::config("teacher.strength", "must be nonnegative"));
        }
        if self.eval.n_samples < 100 || self.eval.n_samples_during < 100 {
            return Err(Error::config("eval.n_samples", "at least 100 samples required"));
        }
        if self.nets.gen_width == 0 || self.nets.score_width == 0 {
            return Err(Error::config("nets.score_width", "widths must be positive"));
        }
        Ok(())
    }

    /// The budget must cover the stage thresholds only for training runs
    /// that are meant to reach stage 3; shorter budgets are legal and simply
    /// stop early.
    pub fn stage_of(&self, images_seen: u64) -> u8 {
        if images_seen > self.train.n2 { 1 } else { 0 }
    }

    /// Canonical JSON: keys sorted, default float formatting.
    pub fn canonical_json(&self) -> Result<String> {
        let v = serde_json::to_value(self).map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(canonical(&v))
    }

    /// Hash of the sections a checkpoint depends on (data, teacher, nets,
    /// schedule).
    pub fn compat_hash(&self) -> Result<String> {
        let v = serde_json::json!({
            "data": self.data,
            "teacher": self.teacher,
            "nets": self.nets,
            "schedule": self.schedule,
        });
        Ok(sha256_hex(canonical(&v).as_bytes()))
    }

    pub fn full_hash(&self) -> Result<String> {
        Ok(sha256_hex(self.canonical_json()?.as_bytes()))
    }

    /// Output directory: `out_dir`, else `$SIDA_OUT_DIR/<name>`, else
    /// `runs/<name>`.
    pub fn resolve_out_dir(&self) -> PathBuf {
        if let Some(d) = &self.out_dir {
            return d.clone();
        }
        output_root().join(&self.name)
    }

    /// The SiD checkpoint for `sid2a`; relative paths are taken from the
    /// output root, so presets can name another preset's run directory.
    pub fn resolve_sid_checkpoint(&self) -> Option<PathBuf> {
        let p = self.train.sid_checkpoint.as_ref()?;
        Some(if p.is_absolute() { p.clone() } else { output_root().join(p) })
    }
}

/// `$SIDA_OUT_DIR`, else `runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os("SIDA_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn parse_toml_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap_or(toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialises with object keys sorted recursively.
pub fn canonical(v: &serde_json::Value) -> String {
    fn sort(v: &serde_json::Value) -> serde_json::Value {
        match v {
            serde_json::Value::Object(m) => {
                let mut keys: Vec<&String> = m.keys().collect();
                keys.sort();
                let mut out = serde_json::Map::new();
                for k in keys {
                    out.insert(k.clone(), sort(&m[k]));
                }
                serde_json::Value::Object(out)
            }
            serde_json::Value::Array(a) => serde_json::Value::Array(a.iter().map(sort).collect()),
            other => other.clone(),
        }
    }
    serde_json::to_string_pretty(&sort(v)).expect("json values serialise")
}
