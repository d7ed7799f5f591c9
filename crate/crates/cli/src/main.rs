use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;
use tracing::{info, warn};
use tracing_subscriber::EnvFilter;
use vibes_core::config::PipelineConfig;
use vibes_core::eval::{self, DEFAULT_TOL, REPORT_FILE, TIMELINE_FILE};
use vibes_core::ingest::{DetectionReader, DirFrameStore, FrameSource, StreamFormat};
use vibes_core::pipeline::{self, RunOptions};
use vibes_core::reasoner::{Drain, IncidentLog, MockConfig, MockResponses, MockServer};
use vibes_core::simulator::{render_frames, scenarios, simulate, ScenarioSpec};
use vibes_core::tiling::plan_tiles;

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const SCENARIO_FILE: &str = "scenario.json";
pub const FRAMES_DIR: &str = "frames";

/// Streaming far-field expressway anomaly engine.
#[derive(Debug, Parser)]
#[command(name = "vibes", version)]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set bayes.mode=no_frenet`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene: detections, ground truth and optional frames.
    Simulate(SimulateArgs),
    /// Score a detection stream and write scores, packets and incidents.
    Run(RunArgs),
    /// Score a run directory against ground truth.
    Eval(EvalArgs),
    /// Serve canned incident reports on a local chat-completions endpoint.
    MockServe(MockArgs),
    /// Export the tile plan used for sliced detection.
    PlanTiles(PlanArgs),
    /// Print the effective configuration as TOML.
    ShowConfig,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Family {
    Recall,
    Nominal,
    Arc,
    FlowShift,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario specification (JSON).
    #[arg(long, conflicts_with = "scenario")]
    spec: Option<PathBuf>,
    /// Built-in scenario family.
    #[arg(long, default_value = "recall")]
    scenario: Family,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also render every frame into `<out>/frames`.
    #[arg(long)]
    frames: bool,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Detection stream (`.jsonl`, or MOTChallenge `.txt`).
    #[arg(long)]
    detections: PathBuf,
    /// Stream format; inferred from the extension when omitted.
    #[arg(long)]
    format: Option<StreamFormat>,
    /// Frame directory with a manifest, used for packet crops.
    #[arg(long)]
    frames: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Send packets to the reasoner endpoint.
    #[arg(long)]
    reasoner: bool,
    /// Return without waiting for outstanding reasoner requests.
    #[arg(long, requires = "reasoner")]
    detach: bool,
    /// Stream length in frames, when it extends past the last detection.
    #[arg(long)]
    total_frames: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Incident log to grade; defaults to the run's own log when present.
    #[arg(long)]
    reports: Option<PathBuf>,
    /// Matching tolerance, frames.
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: u64,
    /// Output directory; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MockArgs {
    #[arg(long, default_value_t = 8089)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Canned replies (JSON list, or `{by_class, default}` table).
    #[arg(long)]
    responses: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    latency_ms: u64,
    #[arg(long, default_value_t = 0.0)]
    failure_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PlanArgs {
    /// Frame size; defaults to the configured one.
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    if let Err(e) = try_main(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn try_main(cli: Cli) -> Result<()> {
    let config = PipelineConfig::load(cli.config.as_deref(), &cli.overrides)
        .context("loading configuration")?;
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Run(a) => cmd_run(config, a),
        Command::Eval(a) => cmd_eval(a),
        Command::MockServe(a) => cmd_mock(a),
        Command::PlanTiles(a) => cmd_plan(&config, a),
        Command::ShowConfig => {
            print!("{}", config.to_toml());
            Ok(())
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let spec: ScenarioSpec = match &a.spec {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => match a.scenario {
            Family::Recall => scenarios::recall_scenario(a.seed),
            Family::Nominal => scenarios::nominal_scenario(a.seed),
            Family::Arc => scenarios::arc_nominal_scenario(a.seed),
            Family::FlowShift => scenarios::flow_shift_scenario(a.seed),
        },
    };
    let sim = simulate(&spec)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let det_path = a.out.join(DETECTIONS_FILE);
    let mut w = BufWriter::new(
        File::create(&det_path).with_context(|| format!("creating {}", det_path.display()))?,
    );
    sim.write_jsonl(&mut w)?;
    w.flush()?;
    write_json(&a.out.join(GROUND_TRUTH_FILE), &sim.ground_truth)?;
    write_json(&a.out.join(SCENARIO_FILE), &sim.spec)?;
    if a.frames {
        render_frames(&sim, &a.out.join(FRAMES_DIR), 10.0)?;
    }
    info!(
        frames = sim.spec.duration,
        vehicles = sim.vehicles.len(),
        events = sim.ground_truth.events.len(),
        out = %a.out.display(),
        "scene written"
    );
    Ok(())
}

fn infer_format(path: &Path) -> StreamFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("txt") | Some("mot") => StreamFormat::Mot,
        _ => StreamFormat::Jsonl,
    }
}

fn cmd_run(mut config: PipelineConfig, a: RunArgs) -> Result<()> {
    let frames: Option<Box<dyn FrameSource>> = match &a.frames {
        Some(dir) => {
            let store = DirFrameStore::open(dir)
                .with_context(|| format!("opening frames {}", dir.display()))?;
            let (w, h) = store.dims();
            if (w, h) != (config.frame_w, config.frame_h) {
                info!(
                    width = w,
                    height = h,
                    "frame size taken from the frame manifest"
                );
                config.frame_w = w;
                config.frame_h = h;
            }
            Some(Box::new(store))
        }
        None => None,
    };
    let format = a.format.unwrap_or_else(|| infer_format(&a.detections));
    let file =
        File::open(&a.detections).with_context(|| format!("opening {}", a.detections.display()))?;
    let mut reader = DetectionReader::new(BufReader::new(file), format);

    let opts = RunOptions {
        frames,
        reasoner_enabled: a.reasoner,
        drain: if a.detach { Drain::Detach } else { Drain::Wait },
        total_frames: a.total_frames,
        ..RunOptions::new(&a.out)
    };
    let stats = pipeline::run(config, reader.by_ref(), opts)?;
    let report = reader.into_report();
    if report.records_skipped > 0 {
        warn!(
            skipped = report.records_skipped,
            "malformed detection records skipped"
        );
    }
    write_json(&a.out.join("ingest_report.json"), &report)?;
    info!(
        frames = stats.frames,
        packets = stats.packets,
        efps = format!("{:.0}", stats.efps),
        out = %a.out.display(),
        "run complete"
    );
    print_json(&stats)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let gt = eval::load_ground_truth(&a.gt)?;
    let reports_path = a.reports.clone().or_else(|| {
        let p = a.run.join(pipeline::INCIDENTS_FILE);
        p.exists().then_some(p)
    });
    let reports = match &reports_path {
        Some(p) => {
            Some(IncidentLog::read_all(p).with_context(|| format!("reading {}", p.display()))?)
        }
        None => None,
    };
    let report = eval::evaluate(&a.run, &gt, reports.as_deref(), a.tol)?;

    let out = a.out.unwrap_or_else(|| a.run.clone());
    std::fs::create_dir_all(&out)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    let records = pipeline::read_scores(&a.run.join(pipeline::SCORES_FILE))?;
    let packets = pipeline::load_packets(&a.run)?;
    let svg = eval::timeline_svg(&eval::frame_scores(&records, report.frames), &gt, &packets);
    std::fs::write(out.join(TIMELINE_FILE), svg)?;
    print_json(&report)
}

fn cmd_mock(a: MockArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.failure_rate) {
        bail!("--failure-rate must lie in [0, 1]");
    }
    let responses = match &a.responses {
        Some(p) => MockResponses::load(p)?,
        None => MockResponses::default(),
    };
    let config = MockConfig {
        responses,
        latency: Duration::from_millis(a.latency_ms),
        failure_rate: a.failure_rate,
        seed: a.seed,
    };
    let server = MockServer::start_on(&format!("{}:{}", a.host, a.port), config)?;
    info!(url = %server.url(), "mock reasoner listening");
    println!("{}", server.url());
    server.join();
    Ok(())
}

fn cmd_plan(config: &PipelineConfig, a: PlanArgs) -> Result<()> {
    let t = config.tiling;
    let plan = plan_tiles(
        a.width.unwrap_or(config.frame_w),
        a.height.unwrap_or(config.frame_h),
        t.tile_w,
        t.tile_h,
        t.overlap,
    )?;
    match &a.out {
        Some(p) => write_json(p, &plan),
        None => print_json(&plan),
    }
}
