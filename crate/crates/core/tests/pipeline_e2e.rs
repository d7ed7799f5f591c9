use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;
use vibes_core::config::PipelineConfig;
use vibes_core::eval::{evaluate, DEFAULT_TOL};
use vibes_core::ingest::{read_detection_stream, StreamFormat};
use vibes_core::localization::PACKET_MANIFEST;
use vibes_core::pipeline::{self, run, Engine, RunOptions, RunStats};
use vibes_core::reasoner::{IncidentLog, IncidentRecord, MockConfig, MockServer};
use vibes_core::simulator::{scenarios, simulate, SimFrames, Simulation};

fn scene(seed: u64) -> Arc<Simulation> {
    Arc::new(simulate(&scenarios::recall_scenario(seed)).unwrap())
}

fn run_scene(
    sim: &Arc<Simulation>,
    dir: &std::path::Path,
    config: PipelineConfig,
    reasoner: bool,
) -> RunStats {
    let opts = RunOptions {
        frames: Some(Box::new(SimFrames::new(sim.clone(), 10.0))),
        reasoner_enabled: reasoner,
        total_frames: Some(sim.spec.duration),
        ..RunOptions::new(dir)
    };
    run(config, sim.batches().into_iter().map(Ok), opts).unwrap()
}

#[test]
fn run_then_evaluate_recovers_every_event() {
    let sim = scene(2);
    let dir = tempfile::tempdir().unwrap();
    let stats = run_scene(&sim, dir.path(), PipelineConfig::default(), false);
    assert_eq!(stats.frames, sim.spec.duration);
    assert!(stats.packets > 0);

    let report = evaluate(dir.path(), &sim.ground_truth, None, DEFAULT_TOL).unwrap();
    assert_eq!(report.recall, 1.0);
    assert!(report.auc_roc.unwrap() > 0.8);
    assert!(report.lqr > 0.0 && report.lqr < 1.0);
    assert_eq!(report.event_acc, None);

    for p in pipeline::load_packets(dir.path()).unwrap() {
        let pdir = dir.path().join(pipeline::PACKETS_DIR).join(&p.packet_id);
        assert!(pdir.join(PACKET_MANIFEST).is_file());
        assert_eq!(p.crop_files().count() as u64, p.window_len());
        for (_, file) in p.crop_files() {
            let img = image::open(pdir.join(file)).unwrap();
            assert!(img.width() > 0 && img.height() > 0);
        }
    }
}

#[test]
fn window_fraction_matches_a_recount_from_manifests() {
    let sim = scene(5);
    let dir = tempfile::tempdir().unwrap();
    let stats = run_scene(&sim, dir.path(), PipelineConfig::default(), false);
    let mut frames = BTreeSet::new();
    for p in pipeline::load_packets(dir.path()).unwrap() {
        frames.extend(p.window[0]..=p.window[1]);
    }
    let recount = frames.range(..sim.spec.duration).count() as u64;
    assert_eq!(recount, stats.window_frames);
    let report = evaluate(dir.path(), &sim.ground_truth, None, DEFAULT_TOL).unwrap();
    assert_eq!(report.window_frames, recount);
    assert_eq!(report.lqr, recount as f64 / sim.spec.duration as f64);
}

#[test]
fn scores_never_depend_on_future_frames() {
    let sim = scene(7);
    let batches = sim.batches();
    let cut = 140;
    let score_all = |n: usize| {
        let mut engine = Engine::new(PipelineConfig::default()).unwrap();
        let mut scores = Vec::new();
        let mut packets = Vec::new();
        for b in &batches[..n] {
            let out = engine.process(b).unwrap();
            scores.extend(out.scores);
            packets.extend(out.packets);
        }
        (scores, packets)
    };
    let (full_scores, full_packets) = score_all(batches.len());
    let (prefix_scores, prefix_packets) = score_all(cut);
    let n = full_scores
        .iter()
        .take_while(|r| r.frame < cut as u64)
        .count();
    assert!(n > 0);
    assert_eq!(&full_scores[..n], &prefix_scores[..]);
    assert_eq!(&full_packets[..prefix_packets.len()], &prefix_packets[..]);
}

#[test]
fn identical_inputs_give_identical_outputs() {
    let sim = scene(4);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_scene(&sim, a.path(), PipelineConfig::default(), false);
    run_scene(&sim, b.path(), PipelineConfig::default(), false);
    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(
        read(a.path(), pipeline::SCORES_FILE),
        read(b.path(), pipeline::SCORES_FILE)
    );
    let (pa, pb) = (
        pipeline::load_packets(a.path()).unwrap(),
        pipeline::load_packets(b.path()).unwrap(),
    );
    assert_eq!(pa, pb);
}

#[test]
fn detections_survive_a_round_trip_through_jsonl() {
    let sim = scene(1);
    let mut buf = Vec::new();
    sim.write_jsonl(&mut buf).unwrap();
    let (batches, report) = read_detection_stream(buf.as_slice(), StreamFormat::Jsonl).unwrap();
    assert_eq!(report.records_skipped, 0);
    let expected: Vec<_> = sim
        .batches()
        .into_iter()
        .filter(|b| !b.detections.is_empty())
        .collect();
    assert_eq!(batches, expected);
}

#[test]
fn reasoner_reports_are_logged_and_graded() {
    let sim = scene(3);
    let server = MockServer::start(0, MockConfig::default()).unwrap();
    let mut config = PipelineConfig::default();
    config.reasoner.endpoint = server.url();
    let dir = tempfile::tempdir().unwrap();
    let stats = run_scene(&sim, dir.path(), config, true);
    let summary = stats.dispatch.unwrap();
    assert_eq!(summary.ok, stats.packets);
    assert_eq!(server.requests(), stats.packets);

    let records = IncidentLog::read_all(&dir.path().join(pipeline::INCIDENTS_FILE)).unwrap();
    assert_eq!(records.len() as u64, stats.packets);
    assert!(records
        .iter()
        .all(|r| matches!(r, IncidentRecord::Ok { .. })));
    let report = evaluate(dir.path(), &sim.ground_truth, Some(&records), DEFAULT_TOL).unwrap();
    let (event, detail) = (report.event_acc.unwrap(), report.detail_acc.unwrap());
    assert!((0.0..=1.0).contains(&event) && (0.0..=1.0).contains(&detail));
}

#[test]
fn failing_endpoint_is_logged_without_stalling_the_stream() {
    let sim = scene(3);
    let server = MockServer::start(
        0,
        MockConfig {
            failure_rate: 1.0,
            latency: Duration::from_millis(5),
            ..Default::default()
        },
    )
    .unwrap();
    let mut config = PipelineConfig::default();
    config.reasoner.endpoint = server.url();
    config.reasoner.max_retries = 1;
    config.reasoner.backoff_ms = 1;
    let dir = tempfile::tempdir().unwrap();
    let stats = run_scene(&sim, dir.path(), config, true);
    assert_eq!(stats.frames, sim.spec.duration);
    let records = IncidentLog::read_all(&dir.path().join(pipeline::INCIDENTS_FILE)).unwrap();
    assert_eq!(records.len() as u64, stats.packets);
    assert!(records
        .iter()
        .all(|r| matches!(r, IncidentRecord::Failed { attempts: 2, .. })));
}
