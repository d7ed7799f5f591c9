//! Streaming run loop: detections in, score log, trigger packets and
//! incident reports out. Scoring never waits on the reasoner.

mod engine;

pub use engine::{Engine, FrameOutput, ScoreRecord, StageTimes};

use crate::config::PipelineConfig;
use crate::ingest::{DetectionBatch, FrameSource, IngestError};
use crate::kinematics::KinematicsError;
use crate::localization::{LocalizationError, TriggerPacket};
use crate::reasoner::{
    DispatchSummary, Dispatcher, Drain, HttpTransport, ReasonerError, Transport,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;
use tracing::{info, warn};

pub const SCORES_FILE: &str = "scores.jsonl";
pub const INCIDENTS_FILE: &str = "incidents.jsonl";
pub const STATS_FILE: &str = "run_stats.json";
pub const PACKETS_DIR: &str = "packets";
pub const SPILL_DIR: &str = "spill";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),

    #[error("ingest: {0}")]
    Ingest(#[from] IngestError),

    #[error("tracking: {0}")]
    Tracking(KinematicsError),

    #[error("localization: {0}")]
    Localization(LocalizationError),

    #[error("reasoner: {0}")]
    Reasoner(#[from] ReasonerError),

    #[error("output {path}: {source}")]
    Output {
        path: String,
        source: std::io::Error,
    },
}

fn out_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Output {
        path: path.display().to_string(),
        source,
    }
}

pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Source for crop pixels; packets carry boxes only when absent.
    pub frames: Option<Box<dyn FrameSource>>,
    /// Reasoner transport; defaults to HTTP against the configured endpoint.
    pub transport: Option<Box<dyn Transport>>,
    pub reasoner_enabled: bool,
    pub drain: Drain,
    /// Length of the stream in frames, for the window-fraction statistic.
    /// Defaults to one past the last frame seen.
    pub total_frames: Option<u64>,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            frames: None,
            transport: None,
            reasoner_enabled: false,
            drain: Drain::Wait,
            total_frames: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunStats {
    pub frames: u64,
    pub total_frames: u64,
    pub detections: u64,
    pub score_records: u64,
    pub triggers: u64,
    pub packets: u64,
    pub truncated_packets: u64,
    /// Frames covered by the union of packet windows.
    pub window_frames: u64,
    pub window_fraction: f64,
    pub stages: StageTimes,
    pub packet_write_s: f64,
    /// Wall time from the first frame to return.
    pub wall_s: f64,
    /// Frames per second of wall time, including packet output and reasoner hand-off.
    pub efps: f64,
    pub dispatch: Option<DispatchSummary>,
}

/// Runs the engine over a batch stream and writes all run artifacts to
/// `opts.out_dir`.
pub fn run<I>(
    config: PipelineConfig,
    batches: I,
    opts: RunOptions,
) -> Result<RunStats, PipelineError>
where
    I: IntoIterator<Item = Result<DetectionBatch, IngestError>>,
{
    let start = Instant::now();
    let out = &opts.out_dir;
    std::fs::create_dir_all(out.join(PACKETS_DIR)).map_err(out_err(out))?;
    let scores_path = out.join(SCORES_FILE);
    let mut scores = BufWriter::new(File::create(&scores_path).map_err(out_err(&scores_path))?);

    let mut dispatcher = if opts.reasoner_enabled {
        let transport = match opts.transport {
            Some(t) => t,
            None => Box::new(HttpTransport::new(&config.reasoner)),
        };
        Some(Dispatcher::spawn(
            config.reasoner.clone(),
            transport,
            &out.join(INCIDENTS_FILE),
            &out.join(SPILL_DIR),
        )?)
    } else {
        None
    };

    let mut engine = Engine::new(config)?;
    let mut stats = RunStats::default();
    let mut windows = BTreeSet::new();
    let frames = opts.frames.as_deref();

    let mut emit = |packets: Vec<TriggerPacket>,
                    stats: &mut RunStats,
                    dispatcher: &mut Option<Dispatcher>|
     -> Result<(), PipelineError> {
        for mut p in packets {
            let t0 = Instant::now();
            let dir = out.join(PACKETS_DIR).join(&p.packet_id);
            p.write(&dir, frames).map_err(PipelineError::Localization)?;
            stats.packet_write_s += t0.elapsed().as_secs_f64();
            stats.packets += 1;
            stats.truncated_packets += p.truncated as u64;
            windows.extend(p.window[0]..=p.window[1]);
            if let Some(d) = dispatcher.as_mut() {
                d.submit(p, &dir)?;
            }
        }
        Ok(())
    };

    for batch in batches {
        let batch = batch?;
        stats.detections += batch.detections.len() as u64;
        let fo = engine.process(&batch)?;
        stats.frames += 1;
        stats.triggers += fo.triggers.len() as u64;
        stats.score_records += fo.scores.len() as u64;
        for r in &fo.scores {
            serde_json::to_writer(&mut scores, r).map_err(|e| PipelineError::Output {
                path: scores_path.display().to_string(),
                source: e.into(),
            })?;
            scores.write_all(b"\n").map_err(out_err(&scores_path))?;
        }
        emit(fo.packets, &mut stats, &mut dispatcher)?;
    }
    let rest = engine.finish()?;
    emit(rest, &mut stats, &mut dispatcher)?;
    scores.flush().map_err(out_err(&scores_path))?;

    stats.stages = engine.stage_times();
    stats.total_frames = opts
        .total_frames
        .unwrap_or_else(|| engine.last_frame().map_or(0, |f| f + 1));
    stats.window_frames = windows.range(..stats.total_frames).count() as u64;
    stats.window_fraction = if stats.total_frames > 0 {
        stats.window_frames as f64 / stats.total_frames as f64
    } else {
        0.0
    };
    if let Some(d) = dispatcher {
        stats.dispatch = Some(d.finish(opts.drain));
    }
    stats.wall_s = start.elapsed().as_secs_f64();
    stats.efps = if stats.wall_s > 0.0 {
        stats.frames as f64 / stats.wall_s
    } else {
        0.0
    };

    let stats_path = out.join(STATS_FILE);
    let text = serde_json::to_string_pretty(&stats).expect("stats serialize");
    std::fs::write(&stats_path, text).map_err(out_err(&stats_path))?;
    info!(
        frames = stats.frames,
        packets = stats.packets,
        efps = stats.efps,
        "run complete"
    );
    if stats.dispatch.is_some_and(|d| d.failed > 0) {
        warn!("some packets could not be reasoned about; see {INCIDENTS_FILE}");
    }
    Ok(stats)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>, PipelineError> {
    let file = File::open(path).map_err(out_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(out_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| PipelineError::Output {
                path: path.display().to_string(),
                source: e.into(),
            })?,
        );
    }
    Ok(out)
}

/// Loads every packet written under `<run>/packets`, ordered by trigger frame.
pub fn load_packets(run_dir: &Path) -> Result<Vec<TriggerPacket>, PipelineError> {
    let dir = run_dir.join(PACKETS_DIR);
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(&dir).map_err(out_err(&dir))? {
        let path = entry.map_err(out_err(&dir))?.path();
        if path.is_dir() {
            out.push(TriggerPacket::load(&path).map_err(PipelineError::Localization)?);
        }
    }
    out.sort_by_key(|p| (p.t_a, p.ego_id));
    Ok(out)
}
