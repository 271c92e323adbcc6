use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sida_core::checkpoint::{write_atomic, Checkpoint, Role};
use sida_core::config::{Mode, RunConfig};
use sida_core::eval::{ablate_alpha, compare_convergence, metric_report};
use sida_core::plot::{alpha_chart, comparison_chart, metrics_chart, render_svg, Chart};
use sida_core::trainer::{run_training, Setup};
use sida_core::{presets, Error, Result};

#[derive(Parser)]
#[command(name = "sida", version, about = "Distill diffusion teachers into one-step generators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        budget: Option<u64>,
        /// Output directory; overrides `out_dir` and `$SIDA_OUT_DIR`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a generator checkpoint and append the report to an eval log.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Eval log (JSON lines); defaults to eval-log.jsonl beside the checkpoint.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Sweep alpha over `sweep.alphas` x `sweep.seeds`.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Compare `sweep.modes` over `sweep.seeds` against a metric threshold.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Overlay metrics.csv files in one SVG chart.
    Plot {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
        /// Plot the Fisher divergence instead of the energy distance.
        #[arg(long)]
        fisher: bool,
        #[arg(long)]
        title: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// List the shipped presets.
    Presets,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file, or a preset name such as `ring-8/corrupted-sida`.
    config: String,
    /// `section.key=value` overrides, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep root directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let path = Path::new(&self.config);
        let cfg = if path.exists() || presets::source(&self.config).is_none() {
            RunConfig::load(path)?
        } else {
            presets::load(&self.config)?
        };
        cfg.with_overrides(&self.overrides)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, mode, seed, budget, out } => {
            let mut cfg = config.load()?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(b) = budget {
                cfg.train.budget = b;
            }
            if out.is_some() {
                cfg.out_dir = out;
            }
            let summary = run_training(&cfg)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", to_json(&summary)?);
            Ok(())
        }
        Command::Eval { checkpoint, config, log } => {
            let cfg = config.load()?;
            let setup = Setup::new(&cfg)?;
            let ck = Checkpoint::load_expecting(&checkpoint, &setup.compat_hash, &[Role::GeneratorEma, Role::Generator])?;
            let n = cfg.eval.n_samples;
            let report = metric_report(&setup.generate_eval(&ck.params, n)?, &setup.eval_real(n)?, cfg.eval.seed)?;
            println!("{}", to_json(&report)?);
            let entry = serde_json::json!({
                "checkpoint": checkpoint.display().to_string(),
                "images_seen": ck.header.images_seen,
                "role": ck.header.role,
                "report": report,
            });
            let log = log.unwrap_or_else(|| checkpoint.with_file_name("eval-log.jsonl"));
            append_line(&log, &entry.to_string())
        }
        Command::Ablate { config, sweep } => {
            let cfg = config.load()?;
            let root = sweep.out.unwrap_or_else(|| cfg.resolve_out_dir());
            let table = ablate_alpha(&cfg, &cfg.sweep.alphas, &cfg.sweep.seeds, &root, workers(&cfg, sweep.workers))?;
            write_chart(&root.join("ablation.svg"), &alpha_chart(&table))?;
            for (a, m) in table.medians() {
                println!("alpha {a}: median final energy distance {}", fmt_opt(m));
            }
            Ok(())
        }
        Command::Compare { config, sweep } => {
            let cfg = config.load()?;
            let root = sweep.out.unwrap_or_else(|| cfg.resolve_out_dir());
            let report = compare_convergence(
                &cfg,
                &cfg.sweep.modes,
                &cfg.sweep.seeds,
                cfg.sweep.threshold,
                &root,
                workers(&cfg, sweep.workers),
            )?;
            write_chart(&root.join("comparison.svg"), &comparison_chart(&report))?;
            for r in &report.results {
                println!(
                    "{} seed {}: final energy distance {}",
                    r.cell.mode.as_str(),
                    r.cell.seed,
                    fmt_opt(r.final_energy())
                );
            }
            println!("median sida/sid samples to threshold: {}", fmt_opt(report.median_ratio));
            Ok(())
        }
        Command::Plot { metrics, out, fisher, title, threshold } => {
            let paths: Vec<&Path> = metrics.iter().map(PathBuf::as_path).collect();
            let mut chart = metrics_chart(&paths, fisher)?;
            if let Some(t) = title {
                chart.title = t;
            }
            chart.rule = threshold.map(|t| (t, format!("threshold {t}")));
            write_chart(&out, &chart)
        }
        Command::Presets => {
            for name in presets::names() {
                println!("{name}");
            }
            Ok(())
        }
    }
}

fn workers(cfg: &RunConfig, flag: Option<usize>) -> usize {
    flag.unwrap_or(cfg.sweep.workers).max(1)
}

fn write_chart(path: &Path, chart: &Chart) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_atomic(path, render_svg(chart)?.as_bytes())
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Invalid(e.to_string()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "n/a".into())
}
