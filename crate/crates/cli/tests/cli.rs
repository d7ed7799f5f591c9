use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn vibes(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vibes"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = vibes(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    if text.trim().is_empty() {
        serde_json::Value::Null
    } else {
        serde_json::from_str(&text).unwrap()
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_run_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, run) = (dir.path().join("scene"), dir.path().join("run"));
    ok(&[
        "simulate",
        "--scenario",
        "recall",
        "--seed",
        "2",
        "--out",
        p(&scene),
        "--frames",
    ]);
    for f in [
        "detections.jsonl",
        "ground_truth.json",
        "scenario.json",
        "frames/manifest.json",
    ] {
        assert!(scene.join(f).is_file(), "{f} missing");
    }

    let stats = ok(&[
        "run",
        "--detections",
        p(&scene.join("detections.jsonl")),
        "--frames",
        p(&scene.join("frames")),
        "--out",
        p(&run),
    ]);
    assert_eq!(stats["frames"], 300);
    assert!(stats["packets"].as_u64().unwrap() > 0);

    let report = ok(&[
        "eval",
        "--run",
        p(&run),
        "--gt",
        p(&scene.join("ground_truth.json")),
    ]);
    assert_eq!(report["recall"], 1.0);
    assert!(report["auc_roc"].as_f64().unwrap() > 0.8);
    assert!(run.join("eval_report.json").is_file());
    let svg = std::fs::read_to_string(run.join("score_timeline.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn run_reaches_a_mock_reasoner() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, run) = (dir.path().join("scene"), dir.path().join("run"));
    ok(&[
        "simulate",
        "--scenario",
        "recall",
        "--seed",
        "3",
        "--out",
        p(&scene),
        "--frames",
    ]);

    let mut mock = Command::new(env!("CARGO_BIN_EXE_vibes"))
        .args(["mock-serve", "--port", "0"])
        .env("RUST_LOG", "warn")
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut url = String::new();
    BufReader::new(mock.stdout.take().unwrap())
        .read_line(&mut url)
        .unwrap();
    let endpoint = format!("reasoner.endpoint={}", url.trim());

    let stats = ok(&[
        "--set",
        &endpoint,
        "run",
        "--detections",
        p(&scene.join("detections.jsonl")),
        "--frames",
        p(&scene.join("frames")),
        "--out",
        p(&run),
        "--reasoner",
    ]);
    mock.kill().unwrap();
    mock.wait().unwrap();
    let packets = stats["packets"].as_u64().unwrap();
    assert!(packets > 0);
    assert_eq!(stats["dispatch"]["ok"].as_u64().unwrap(), packets);
    let log = std::fs::read_to_string(run.join("incidents.jsonl")).unwrap();
    assert_eq!(log.lines().count() as u64, packets);

    let report = ok(&[
        "eval",
        "--run",
        p(&run),
        "--gt",
        p(&scene.join("ground_truth.json")),
    ]);
    assert!(report["event_acc"].is_number());
}

#[test]
fn malformed_records_are_skipped_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("dets.jsonl");
    let good = r#"{"frame":0,"track":null,"bbox":[10,10,30,20],"conf":0.9,"class":"car"}"#;
    std::fs::write(&input, format!("{good}\nnot json\n")).unwrap();
    let run = dir.path().join("run");
    let stats = ok(&["run", "--detections", p(&input), "--out", p(&run)]);
    assert_eq!(stats["frames"], 1);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("ingest_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["records_skipped"], 1);
}

#[test]
fn tile_plan_export_covers_the_frame() {
    let plan = ok(&[
        "--set",
        "tiling.tile_w=512",
        "plan-tiles",
        "--width",
        "1280",
        "--height",
        "720",
    ]);
    assert_eq!(plan["tile_w"], 512);
    let tiles = plan["tiles"].as_array().unwrap();
    assert!(!tiles.is_empty());
    let max_x = tiles
        .iter()
        .map(|t| t[2].as_f64().unwrap())
        .fold(0.0, f64::max);
    let max_y = tiles
        .iter()
        .map(|t| t[3].as_f64().unwrap())
        .fold(0.0, f64::max);
    assert_eq!((max_x, max_y), (1280.0, 720.0));
}

#[test]
fn configuration_overrides_apply_and_unknown_keys_fail() {
    let out = vibes(&["--set", "bayes.mode=no_frenet", "show-config"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("mode = \"no_frenet\""));

    let out = vibes(&["--set", "bayes.nope=1", "show-config"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}
