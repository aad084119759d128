use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

fn metadan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metadan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = metadan(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    metadan(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "synth": { "max_lines": 2, "max_chars_per_line": 12 },
  "splits": { "train": 4, "val": 2, "test": 3 },
  "model": { "channels": 16, "layers": 1, "attn_heads": 2, "ff_width": 32, "encoder_widths": [4, 4, 8, 8] },
  "train": { "steps": 200, "batch_size": 2, "lr": 0.001, "curriculum": { "start_lines": 1, "end_lines": 2, "ramp_fraction": 0.5 } }
}"#;

struct Fixture {
    _dir: TempDir,
    config: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
    log: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let config = dir.path().join("run.json");
        fs::write(&config, TINY).unwrap();
        let data = dir.path().join("data");
        let ckpt = dir.path().join("ckpt");
        let log = dir.path().join("train.jsonl");
        ok(&[
            "synth",
            "--config",
            s(&config),
            "--out",
            s(&data),
            "--seed",
            "3",
        ]);
        ok(&[
            "train",
            "--config",
            s(&config),
            "--data",
            s(&data),
            "--out",
            s(&ckpt),
            "--variant",
            "dan",
            "--log",
            s(&log),
        ]);
        Fixture {
            _dir: dir,
            config,
            data,
            ckpt,
            log,
        }
    })
}

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().into_string().unwrap(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_is_deterministic_for_a_seed() {
    let dir = TempDir::new().unwrap();
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    for out in [&a, &b] {
        ok(&[
            "synth",
            "--out",
            s(out),
            "--seed",
            "11",
            "--train",
            "3",
            "--val",
            "1",
            "--test",
            "1",
        ]);
    }
    ok(&[
        "synth",
        "--out",
        s(&c),
        "--seed",
        "12",
        "--train",
        "3",
        "--val",
        "1",
        "--test",
        "1",
    ]);
    assert_eq!(dir_contents(&a), dir_contents(&b));
    assert_ne!(dir_contents(&a), dir_contents(&c));
    assert_eq!(dir_contents(&a).len(), 6);
}

#[test]
fn io_and_config_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing");
    assert_eq!(
        code(&[
            "synth",
            "--config",
            s(&missing.join("run.json")),
            "--out",
            s(&missing)
        ]),
        2
    );
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{ "train": { "stepz": 3 } }"#).unwrap();
    assert_eq!(
        code(&["synth", "--config", s(&bad), "--out", s(&missing)]),
        2
    );
    assert_eq!(
        code(&["eval", "--ckpt", s(&missing), "--data", s(&missing)]),
        2
    );
    assert_eq!(code(&["train", "--steps", "5"]), 2);
}

#[test]
fn training_writes_checkpoint_and_step_log() {
    let f = fixture();
    let manifest: Value =
        serde_json::from_slice(&fs::read(f.ckpt.join("model.json")).unwrap()).unwrap();
    assert_eq!(manifest["step"], 200);
    assert!(f.ckpt.join("model.json").exists() && f.ckpt.join("model.bin").exists());
    let log = fs::read_to_string(&f.log).unwrap();
    let entries: Vec<Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(entries.len(), 200);
    for (i, e) in entries.iter().enumerate() {
        assert_eq!(e["step"], i as u64);
        assert!(e["loss"].as_f64().unwrap().is_finite());
        assert!(e["lr"].is_number() && e["lines_cap"].is_number());
    }
}

#[test]
fn resume_continues_the_step_counter() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("resumed");
    let log = dir.path().join("log.jsonl");
    ok(&[
        "train",
        "--data",
        s(&f.data),
        "--resume",
        s(&f.ckpt),
        "--steps",
        "210",
        "--out",
        s(&out),
        "--log",
        s(&log),
    ]);
    let steps: Vec<u64> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["step"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(steps, (200..210).collect::<Vec<_>>());
    let manifest: Value =
        serde_json::from_slice(&fs::read(out.join("model.json")).unwrap()).unwrap();
    assert_eq!(manifest["step"], 210);
}

#[test]
fn dan_rejects_a_window() {
    let f = fixture();
    let image = f.data.join("test_00000.pgm");
    assert_eq!(
        code(&[
            "decode",
            "--ckpt",
            s(&f.ckpt),
            "--image",
            s(&image),
            "--variant",
            "dan",
            "--w",
            "3"
        ]),
        2
    );
}

#[test]
fn meta_with_unit_window_and_heads_matches_dan() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    for i in 0..3 {
        let image = f.data.join(format!("test_{i:05}.pgm"));
        let trace = dir.path().join("trace.json");
        let dan = ok(&[
            "decode",
            "--ckpt",
            s(&f.ckpt),
            "--image",
            s(&image),
            "--trace",
            s(&trace),
        ]);
        let meta = ok(&[
            "decode",
            "--ckpt",
            s(&f.ckpt),
            "--image",
            s(&image),
            "--variant",
            "meta",
            "--w",
            "1",
            "--m",
            "1",
        ]);
        assert_eq!(dan.stdout, meta.stdout);
        let t: Value = serde_json::from_slice(&fs::read(&trace).unwrap()).unwrap();
        assert!(t["iterations"].as_u64().unwrap() >= 1);
    }
}

#[test]
fn dynamic_policy_is_accepted() {
    let f = fixture();
    let image = f.data.join("test_00001.pgm");
    ok(&[
        "decode",
        "--ckpt",
        s(&f.ckpt),
        "--image",
        s(&image),
        "--variant",
        "mtdan",
        "--policy",
        "dynamic",
        "--tau",
        "0.9",
    ]);
    assert_eq!(
        code(&[
            "decode",
            "--ckpt",
            s(&f.ckpt),
            "--image",
            s(&image),
            "--variant",
            "mtdan",
            "--tau",
            "1.5"
        ]),
        2
    );
}

#[test]
fn eval_writes_a_report() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("report.json");
    let csv = dir.path().join("rows.csv");
    ok(&[
        "eval",
        "--ckpt",
        s(&f.ckpt),
        "--data",
        s(&f.data),
        "--split",
        "test",
        "--out",
        s(&out),
        "--csv",
        s(&csv),
        "--jobs",
        "2",
    ]);
    let report: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(report["per_sample"].as_array().unwrap().len(), 3);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 4);
}

#[test]
fn alphabet_mismatch_exits_with_four() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("narrow.json");
    let mut cfg: Value = serde_json::from_str(TINY).unwrap();
    cfg["synth"]["corpus"] = serde_json::json!(["ab", "ba", "aa"]);
    fs::write(&config, cfg.to_string()).unwrap();
    let ckpt = dir.path().join("narrow");
    ok(&[
        "train",
        "--config",
        s(&config),
        "--out",
        s(&ckpt),
        "--steps",
        "1",
        "--log",
        s(&dir.path().join("l")),
    ]);
    assert_eq!(code(&["eval", "--ckpt", s(&ckpt), "--data", s(&f.data)]), 4);
    assert_eq!(
        code(&[
            "train",
            "--config",
            s(&config),
            "--data",
            s(&f.data),
            "--init-from",
            s(&ckpt),
            "--out",
            s(&ckpt),
            "--steps",
            "1"
        ]),
        4
    );
    let image = f.data.join("test_00000.pgm");
    assert_eq!(
        code(&[
            "decode",
            "--ckpt",
            s(&f.ckpt),
            "--image",
            s(&image),
            "--text",
            "ÿ"
        ]),
        4
    );
}

#[test]
fn bench_reports_speedups_and_skips_missing_checkpoints() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("bench.json");
    let dan = format!("dan={}", s(&f.ckpt));
    let wdan = format!("wdan={}@wdan,w=2", s(&f.ckpt));
    let gone = format!("gone={}", s(&dir.path().join("nothing")));
    ok(&[
        "bench",
        "--config",
        s(&f.config),
        "--data",
        s(&f.data),
        "--entry",
        &wdan,
        "--entry",
        &dan,
        "--entry",
        &gone,
        "--out",
        s(&out),
    ]);
    let report: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(report["baseline"], "dan");
    assert_eq!(report["skipped"], serde_json::json!(["gone"]));
    let speedups = report["speedups"].as_array().unwrap();
    let dan = speedups.iter().find(|s| s["name"] == "dan").unwrap();
    assert_eq!(dan["time"], 1.0);
    assert_eq!(dan["iterations"], 1.0);
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn divergence_exits_with_three_and_names_the_step() {
    let dir = TempDir::new().unwrap();
    let out = metadan(&[
        "train",
        "--out",
        s(&dir.path().join("c")),
        "--steps",
        "30",
        "--lr",
        "1e30",
        "--log",
        s(&dir.path().join("l")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
    assert!(!dir.path().join("c").exists());
}
