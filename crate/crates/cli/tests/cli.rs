use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use tsdesign::assembly::{Mode, ModelConfig};
use tsdesign::dataio::load_csv;
use tsdesign::harness::read_log;
use tsdesign::temporal::TemporalKind;

fn tsdesign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsdesign"))
        .args(args)
        .env("TSDESIGN_WORKERS", "1")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    data: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let stem = dir.path().join("ar");
        ok(&tsdesign(&[
            "synth",
            "local-ar",
            "--n",
            "4",
            "--steps",
            "400",
            "--out",
            s(&stem),
        ]));
        Fixture {
            data: stem.with_extension("csv"),
            dir,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, edit: impl FnOnce(&mut ModelConfig)) -> PathBuf {
        let mut cfg = ModelConfig::reference(TemporalKind::Mlp, 4, 8, 2, 8);
        edit(&mut cfg);
        let path = self.path(name);
        std::fs::write(&path, cfg.to_toml()).unwrap();
        path
    }
}

const QUICK: [&str; 6] = ["--epochs", "1", "--max-batches", "2", "--seeds", "0,1"];

#[test]
fn synth_writes_csv_and_sidecar() {
    let dir = TempDir::new().unwrap();
    let stem = dir.path().join("ar");
    ok(&tsdesign(&[
        "synth",
        "local-ar",
        "--n",
        "8",
        "--steps",
        "2048",
        "--seed",
        "3",
        "--out",
        s(&stem),
    ]));
    let text = std::fs::read_to_string(stem.with_extension("csv")).unwrap();
    assert_eq!(text.lines().next().unwrap().split(',').count(), 9);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json")).unwrap()).unwrap();
    let blind = meta["oracle"]["blind"].as_f64().unwrap();
    assert!((meta["oracle"]["informed"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!((blind - (1.0 + 0.64 / 0.36)).abs() < 1e-9);

    let reloaded = load_csv(&stem.with_extension("csv")).unwrap();
    let original = tsdesign::dataio::synth::synth_local_ar(
        8,
        2048,
        1.0,
        tsdesign::dataio::RhoSpec::TwoPoint { a: -0.8, b: 0.8 },
        3,
    )
    .unwrap();
    let worst = reloaded
        .values()
        .iter()
        .zip(original.collection.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-12, "round trip error {worst}");
}

#[test]
fn synth_rejects_bad_generator_parameters() {
    let dir = TempDir::new().unwrap();
    let stem = dir.path().join("x");
    let out = tsdesign(&["synth", "spatial-mixing", "--n", "6", "--k", "4", "--out", s(&stem)]);
    assert!(!out.status.success());
    assert!(!stem.with_extension("csv").exists());
}

#[test]
fn run_appends_one_record() {
    let f = Fixture::new();
    let cfg = f.config("mlp.toml", |_| {});
    let log = f.path("log.jsonl");
    let before = (std::fs::read(&f.data).unwrap(), std::fs::read(&cfg).unwrap());
    let stdout = ok(&tsdesign(
        &[
            &["run", "--config", s(&cfg), "--data", s(&f.data), "--out", s(&log)][..],
            &QUICK,
        ]
        .concat(),
    ));
    assert!(stdout.contains("MSE"));
    assert_eq!(before, (std::fs::read(&f.data).unwrap(), std::fs::read(&cfg).unwrap()));
    let records = read_log(&log).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].result.dataset, "ar");
    assert_eq!(records[0].result.per_seed.len(), 2);
}

#[test]
fn run_overrides_window_and_horizon() {
    let f = Fixture::new();
    let cfg = f.config("mlp.toml", |_| {});
    let log = f.path("log.jsonl");
    let args = [
        &[
            "run",
            "--config",
            s(&cfg),
            "--data",
            s(&f.data),
            "--out",
            s(&log),
            "--window",
            "12",
            "--horizon",
            "3",
        ][..],
        &QUICK,
    ]
    .concat();
    ok(&tsdesign(&args));
    let r = &read_log(&log).unwrap()[0].result;
    assert_eq!((r.config.window, r.config.horizon), (12, 3));
    assert_eq!(r.mse_per_horizon.len(), 3);
}

#[test]
fn invalid_config_fails_with_message() {
    let f = Fixture::new();
    let cfg = f.config("bad.toml", |c| {
        c.mode = Mode::Hybrid;
        c.d_emb = 0;
    });
    let log = f.path("log.jsonl");
    let out = tsdesign(
        &[
            &["run", "--config", s(&cfg), "--data", s(&f.data), "--out", s(&log)][..],
            &QUICK,
        ]
        .concat(),
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("invalid config"), "{err}");
    assert!(!log.exists());
}

#[test]
fn dry_run_prints_card_without_training() {
    let f = Fixture::new();
    let cfg = f.config("mlp.toml", |_| {});
    let log = f.path("log.jsonl");
    let stdout = ok(&tsdesign(&[
        "run",
        "--config",
        s(&cfg),
        "--data",
        s(&f.data),
        "--out",
        s(&log),
        "--dry-run",
    ]));
    assert!(stdout.contains("# Forecasting Model Card"));
    assert!(stdout.contains("fixed lookback window of 8"));
    assert!(!log.exists());
}

#[test]
fn ablate_writes_paired_records_and_bolds_one_arm() {
    let f = Fixture::new();
    let cfg = f.config("mlp.toml", |_| {});
    let log = f.path("log.jsonl");
    let stdout = ok(&tsdesign(
        &[
            &[
                "ablate",
                "--axis",
                "d1",
                "--config",
                s(&cfg),
                "--data",
                s(&f.data),
                "--out",
                s(&log),
            ][..],
            &QUICK,
        ]
        .concat(),
    ));
    let records = read_log(&log).unwrap();
    assert_eq!(records.len(), 2);
    let seeds = |i: usize| records[i].result.per_seed.iter().map(|p| p.seed).collect::<Vec<_>>();
    assert_eq!(seeds(0), seeds(1));
    assert_ne!(records[0].result.config.mode, records[1].result.config.mode);
    let row = stdout.lines().find(|l| l.starts_with("| ar |")).expect("delta row");
    assert_eq!(row.matches("**").count(), 2, "{row}");
}

#[test]
fn unknown_axis_is_rejected() {
    let f = Fixture::new();
    let cfg = f.config("mlp.toml", |_| {});
    let out = tsdesign(&["ablate", "--axis", "d9", "--config", s(&cfg), "--data", s(&f.data)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown ablation axis"));
}

fn two_record_log(f: &Fixture) -> PathBuf {
    let log = f.path("log.jsonl");
    for (name, hidden) in [("small", 4), ("wide", 16)] {
        let cfg = f.config(&format!("{name}.toml"), |c| {
            c.name = Some(name.into());
            c.hidden = hidden;
        });
        ok(&tsdesign(
            &[
                &["run", "--config", s(&cfg), "--data", s(&f.data), "--out", s(&log)][..],
                &QUICK,
            ]
            .concat(),
        ));
    }
    log
}

#[test]
fn report_table_and_scatter() {
    let f = Fixture::new();
    let log = two_record_log(&f);
    let table = ok(&tsdesign(&["report", s(&log)]));
    let rows: Vec<&str> = table.lines().filter(|l| l.starts_with("| ar |")).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().any(|r| r.contains("**")));
    assert!(rows.iter().all(|r| r.contains('±')));

    let svg_path = f.path("scatter.svg");
    ok(&tsdesign(&[
        "report",
        s(&log),
        "--format",
        "svg",
        "--out",
        s(&svg_path),
    ]));
    let svg = std::fs::read_to_string(&svg_path).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("<circle").count(), 2);
}

#[test]
fn report_of_missing_log_fails() {
    let out = tsdesign(&["report", "/nonexistent/log.jsonl"]);
    assert!(!out.status.success());
}

#[test]
fn card_check_reports_violations() {
    let f = Fixture::new();
    let cfg = f.config("mlp.toml", |_| {});
    let card = f.path("card.md");
    ok(&tsdesign(&["card", "--config", s(&cfg), "--out", s(&card)]));
    assert!(ok(&tsdesign(&["card", "--config", s(&cfg), "--check", s(&card)])).contains("card matches config"));

    let wrong = f.config("wide.toml", |c| c.window = 16);
    let out = tsdesign(&["card", "--config", s(&wrong), "--check", s(&card)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("violation: window_length"));
}

#[test]
fn profile_and_sweep_run() {
    let f = Fixture::new();
    let cfg = f.config("mlp.toml", |_| {});
    let stdout = ok(&tsdesign(&[
        "profile",
        "--config",
        s(&cfg),
        "--data",
        s(&f.data),
        "--batch-size",
        "8",
    ]));
    let p: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert!(p["param_count"].as_u64().unwrap() > 0);

    let log = f.path("sweep.jsonl");
    let stdout = ok(&tsdesign(
        &[
            &[
                "sweep",
                "--grid",
                "4,8",
                "--config",
                s(&cfg),
                "--data",
                s(&f.data),
                "--out",
                s(&log),
            ][..],
            &QUICK,
        ]
        .concat(),
    ));
    assert!(stdout.contains("selected hidden"));
    assert_eq!(read_log(&log).unwrap().len(), 1);
}
