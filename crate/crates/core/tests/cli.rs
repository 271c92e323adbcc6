use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const BIN: &str = env!("CARGO_BIN_EXE_sida");

const QUICK: &[&str] = &[
    "--set",
    "train.budget=1024",
    "--set",
    "train.n1=0",
    "--set",
    "train.n2=512",
    "--set",
    "train.eval_every=512",
    "--set",
    "eval.n_samples=500",
    "--set",
    "eval.n_samples_during=500",
];

fn sida(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("SIDA_OUT_DIR").output().expect("run sida")
}

fn train(preset: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", preset];
    args.extend_from_slice(QUICK);
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out", out.to_str().unwrap()]);
    sida(&args)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Two runs of the same config, trained once for the whole file.
fn shared_runs() -> &'static (tempfile::TempDir, PathBuf, PathBuf) {
    static RUNS: OnceLock<(tempfile::TempDir, PathBuf, PathBuf)> = OnceLock::new();
    RUNS.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("first"), tmp.path().join("second"));
        for d in [&a, &b] {
            let o = train("ring-8/exact-sida", d, &[]);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
        }
        (tmp, a, b)
    })
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn same_seed_gives_identical_metrics() {
    let (_, a, b) = shared_runs();
    let csv = read(&a.join("metrics.csv"));
    assert_eq!(csv, read(&b.join("metrics.csv")));
    let last = csv.lines().last().unwrap();
    assert!(last.starts_with("1024,"), "{last}");
    // the adversarial stage switches on after n2
    assert!(csv.lines().skip(1).any(|l| l.split(',').nth(1) == Some("1")));
}

#[test]
fn zero_budget_writes_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    let o = sida(&["train", "ring-8/exact-sid", "--budget", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = read(&out.join("metrics.csv"));
    assert_eq!(csv.lines().count(), 1);
    assert!(csv.starts_with("images_seen,stage_b,"));
}

#[test]
fn eval_is_reproducible_and_logged() {
    let (_, a, _) = shared_runs();
    let ck = a.join("generator-ema.ckpt");
    let args = ["eval", ck.to_str().unwrap(), "ring-8/exact-sida", "--set", "eval.n_samples=500"];
    let first = sida(&args);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let second = sida(&args);
    assert_eq!(first.stdout, second.stdout);
    let report: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    assert!(report["energy_distance"].as_f64().unwrap() >= 0.0);
    let log = read(&a.join("eval-log.jsonl"));
    let entries: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(entries.len() >= 2);
    assert!(entries.iter().all(|e| e["images_seen"] == 1024 && e["role"] == "generator-ema"));
}

#[test]
fn eval_rejects_incompatible_checkpoint() {
    let (_, a, _) = shared_runs();
    let ck = a.join("generator-ema.ckpt");
    let log = a.join("mismatch-log.jsonl");
    let o = sida(&[
        "eval",
        ck.to_str().unwrap(),
        "ring-8/exact-sida",
        "--set",
        "nets.score_width=32",
        "--log",
        log.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("hash"), "{}", stderr(&o));
    assert!(!log.exists());
}

#[test]
fn missing_config_file_exits_2() {
    let o = sida(&["train", "/nonexistent/run.toml"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/run.toml"));
}

#[test]
fn unknown_key_names_the_key() {
    let o = sida(&["train", "ring-8/exact-sid", "--set", "train.bogus=1", "--budget", "0"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.bogus"), "{}", stderr(&o));
}

#[test]
fn empty_sweep_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = sida(&["ablate", "ring-8/exact-sida", "--out", out]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = sida(&["compare", "ring-8/exact-sida", "--out", out]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn presets_are_listed() {
    let o = sida(&["presets"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 24);
    assert!(text.lines().any(|l| l == "ring-8/corrupted-sida"));
}

fn svg_text(svg: &str) -> Vec<String> {
    svg.split("<text")
        .skip(1)
        .filter_map(|t| t.split_once('>').and_then(|(_, rest)| rest.split_once("</text>")).map(|(s, _)| s.to_string()))
        .collect()
}

fn assert_well_formed(svg: &str) {
    assert!(svg.starts_with("<?xml"));
    assert!(svg.trim_end().ends_with("</svg>"));
    // every element is either self-closing or closed
    for tag in ["text", "svg"] {
        assert_eq!(svg.matches(&format!("<{tag}")).count(), svg.matches(&format!("</{tag}>")).count());
    }
    assert!(!svg.contains("NaN") && !svg.contains("inf"));
}

#[test]
fn plot_one_and_two_runs() {
    let (tmp, a, b) = shared_runs();
    let one = tmp.path().join("one.svg");
    let o = sida(&["plot", a.join("metrics.csv").to_str().unwrap(), "-o", one.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svg = read(&one);
    assert_well_formed(&svg);
    assert_eq!(svg.matches("<polyline").count(), 1);
    assert!(svg_text(&svg).contains(&"ring-8-exact-sida".to_string()));

    let two = tmp.path().join("two.svg");
    let (ma, mb) = (a.join("metrics.csv"), b.join("metrics.csv"));
    let args = [
        "plot",
        ma.to_str().unwrap(),
        mb.to_str().unwrap(),
        "-o",
        two.to_str().unwrap(),
        "--threshold",
        "0.5",
        "--title",
        "a & b",
    ];
    assert_eq!(code(&sida(&args)), 0);
    let svg = read(&two);
    assert_well_formed(&svg);
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains("stroke-dasharray"));
    assert!(svg_text(&svg).contains(&"a &amp; b".to_string()));

    // deterministic
    let again = tmp.path().join("again.svg");
    let mut args2 = args;
    args2[4] = again.to_str().unwrap();
    assert_eq!(code(&sida(&args2)), 0);
    assert_eq!(svg, read(&again));
}

#[test]
fn plot_rejects_foreign_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("metrics.csv");
    std::fs::write(&csv, "step,loss\n0,1.0\n").unwrap();
    let o = sida(&["plot", csv.to_str().unwrap(), "-o", tmp.path().join("x.svg").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("header"), "{}", stderr(&o));
}
