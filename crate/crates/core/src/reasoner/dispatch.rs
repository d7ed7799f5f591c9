use super::{build_request, parse_report, IncidentReport, ReasonerConfig, ReasonerError};
use crate::localization::TriggerPacket;
use crossbeam_channel::{bounded, Receiver, Sender, TrySendError};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};
use thiserror::Error;
use tracing::{debug, info, warn};

pub const API_KEY_ENV: &str = "VIBES_API_KEY";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },

    #[error("network: {0}")]
    Network(String),
}

/// One request/response exchange with the endpoint.
pub trait Transport: Send {
    fn post(&mut self, body: &Value) -> Result<String, TransportError>;
}

impl<F> Transport for F
where
    F: FnMut(&Value) -> Result<String, TransportError> + Send,
{
    fn post(&mut self, body: &Value) -> Result<String, TransportError> {
        self(body)
    }
}

/// Chat-completions over HTTP. Sends `Authorization: Bearer $VIBES_API_KEY`
/// when the variable is set.
pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(config: &ReasonerConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self {
            agent,
            endpoint: config.endpoint.clone(),
            api_key,
        }
    }
}

impl Transport for HttpTransport {
    fn post(&mut self, body: &Value) -> Result<String, TransportError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        if (200..300).contains(&status) {
            Ok(text)
        } else {
            Err(TransportError::Status { status, body: text })
        }
    }
}

/// `choices[0].message.content` of a chat-completions response.
pub fn extract_message_content(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    match &v["choices"][0]["message"]["content"] {
        Value::String(s) => Some(s.clone()),
        // content-part arrays: concatenate the text parts
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p["text"].as_str())
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

/// One line of the incident log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum IncidentRecord {
    Ok {
        #[serde(flatten)]
        report: IncidentReport,
        attempts: u32,
    },
    Failed {
        packet_id: String,
        cause: String,
        attempts: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        raw: Option<String>,
    },
    Skipped {
        packet_id: String,
        cause: String,
    },
}

impl IncidentRecord {
    pub fn packet_id(&self) -> &str {
        match self {
            Self::Ok { report, .. } => &report.packet_id,
            Self::Failed { packet_id, .. } | Self::Skipped { packet_id, .. } => packet_id,
        }
    }

    pub fn report(&self) -> Option<&IncidentReport> {
        match self {
            Self::Ok { report, .. } => Some(report),
            _ => None,
        }
    }
}

/// Sends one packet, retrying transport errors with exponential backoff.
/// Never fails: every outcome is a record.
pub fn dispatch_packet(
    transport: &mut dyn Transport,
    packet: &TriggerPacket,
    dir: &Path,
    config: &ReasonerConfig,
) -> IncidentRecord {
    let request = match build_request(packet, dir, config) {
        Ok(r) => r,
        Err(e @ ReasonerError::NoCrops(_)) => {
            warn!(packet = %packet.packet_id, "{e}");
            return IncidentRecord::Skipped {
                packet_id: packet.packet_id.clone(),
                cause: e.to_string(),
            };
        }
        Err(e) => {
            return IncidentRecord::Failed {
                packet_id: packet.packet_id.clone(),
                cause: e.to_string(),
                attempts: 0,
                raw: None,
            }
        }
    };
    let started = Instant::now();
    let max_attempts = config.max_retries + 1;
    let mut attempt = 0;
    loop {
        attempt += 1;
        match transport.post(&request.body) {
            Ok(body) => {
                let content = extract_message_content(&body).unwrap_or(body);
                return match parse_report(&content) {
                    Ok(mut report) => {
                        report.packet_id = packet.packet_id.clone();
                        report.latency_ms = started.elapsed().as_millis() as u64;
                        IncidentRecord::Ok {
                            report,
                            attempts: attempt,
                        }
                    }
                    Err(e) => IncidentRecord::Failed {
                        packet_id: packet.packet_id.clone(),
                        cause: format!("unparseable response: {}", e.reason),
                        attempts: attempt,
                        raw: Some(e.raw),
                    },
                };
            }
            Err(e) if attempt < max_attempts => {
                let delay = config
                    .backoff_ms
                    .saturating_mul(1u64 << (attempt - 1).min(16));
                debug!(packet = %packet.packet_id, attempt, delay_ms = delay, "transient error: {e}");
                std::thread::sleep(Duration::from_millis(delay));
            }
            Err(e) => {
                warn!(packet = %packet.packet_id, attempts = attempt, "giving up: {e}");
                return IncidentRecord::Failed {
                    packet_id: packet.packet_id.clone(),
                    cause: e.to_string(),
                    attempts: attempt,
                    raw: None,
                };
            }
        }
    }
}

/// Append-only JSONL of incident records.
#[derive(Debug)]
pub struct IncidentLog {
    file: File,
}

impl IncidentLog {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            file: OpenOptions::new().create(true).append(true).open(path)?,
        })
    }

    pub fn append(&mut self, record: &IncidentRecord) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(record).map_err(std::io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)
    }

    pub fn read_all(path: &Path) -> std::io::Result<Vec<IncidentRecord>> {
        let mut out = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Submit {
    Queued,
    /// Queue full; the packet was persisted to the spill directory.
    Spilled,
}

/// What to do with outstanding work when the stream ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Drain {
    /// Process the queue and the spill directory, then return.
    #[default]
    Wait,
    /// Return immediately; the worker keeps running in the background.
    Detach,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DispatchSummary {
    pub dispatched: u64,
    pub ok: u64,
    pub failed: u64,
    pub skipped: u64,
    pub spilled: u64,
    /// Wall time spent waiting on the endpoint.
    pub reasoner_wall_s: f64,
    /// `false` when the run returned without waiting for the worker.
    pub drained: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Job {
    packet: TriggerPacket,
    dir: PathBuf,
}

/// Background worker consuming packets from a bounded queue. When the queue
/// is full, packets are spilled to disk instead of blocking the caller and
/// are picked up after the queue closes.
pub struct Dispatcher {
    tx: Option<Sender<Job>>,
    handle: Option<JoinHandle<DispatchSummary>>,
    spill_dir: PathBuf,
    spilled: u64,
}

impl Dispatcher {
    pub fn spawn(
        config: ReasonerConfig,
        transport: Box<dyn Transport>,
        log_path: &Path,
        spill_dir: &Path,
    ) -> Result<Self, ReasonerError> {
        config.validate()?;
        std::fs::create_dir_all(spill_dir)?;
        let log = IncidentLog::open(log_path)?;
        let (tx, rx) = bounded::<Job>(config.queue_capacity);
        let worker_spill = spill_dir.to_path_buf();
        let handle = std::thread::Builder::new()
            .name("reasoner-dispatch".into())
            .spawn(move || worker(rx, transport, config, log, worker_spill))?;
        Ok(Self {
            tx: Some(tx),
            handle: Some(handle),
            spill_dir: spill_dir.to_path_buf(),
            spilled: 0,
        })
    }

    /// Never blocks.
    pub fn submit(&mut self, packet: TriggerPacket, dir: &Path) -> Result<Submit, ReasonerError> {
        let tx = self.tx.as_ref().expect("dispatcher already finished");
        match tx.try_send(Job {
            packet,
            dir: dir.to_path_buf(),
        }) {
            Ok(()) => Ok(Submit::Queued),
            Err(TrySendError::Full(job)) | Err(TrySendError::Disconnected(job)) => {
                self.spilled += 1;
                let name = format!("{:06}_{}.json", self.spilled, job.packet.packet_id);
                let bytes = serde_json::to_vec(&job).map_err(std::io::Error::other)?;
                std::fs::write(self.spill_dir.join(name), bytes)?;
                debug!(packet = %job.packet.packet_id, "queue full; spilled");
                Ok(Submit::Spilled)
            }
        }
    }

    pub fn spilled(&self) -> u64 {
        self.spilled
    }

    pub fn finish(mut self, drain: Drain) -> DispatchSummary {
        drop(self.tx.take());
        let handle = self.handle.take().expect("worker handle");
        match drain {
            Drain::Wait => {
                let mut s = handle.join().unwrap_or_else(|_| {
                    warn!("dispatcher worker panicked");
                    DispatchSummary::default()
                });
                s.spilled = self.spilled;
                s.drained = true;
                s
            }
            Drain::Detach => DispatchSummary {
                spilled: self.spilled,
                drained: false,
                ..Default::default()
            },
        }
    }
}

fn worker(
    rx: Receiver<Job>,
    mut transport: Box<dyn Transport>,
    config: ReasonerConfig,
    mut log: IncidentLog,
    spill_dir: PathBuf,
) -> DispatchSummary {
    let mut summary = DispatchSummary::default();
    let mut handle = |job: Job, summary: &mut DispatchSummary| {
        let t0 = Instant::now();
        let record = dispatch_packet(transport.as_mut(), &job.packet, &job.dir, &config);
        summary.reasoner_wall_s += t0.elapsed().as_secs_f64();
        summary.dispatched += 1;
        match &record {
            IncidentRecord::Ok { .. } => summary.ok += 1,
            IncidentRecord::Failed { .. } => summary.failed += 1,
            IncidentRecord::Skipped { .. } => summary.skipped += 1,
        }
        if let Err(e) = log.append(&record) {
            warn!("incident log write failed: {e}");
        }
    };
    for job in rx.iter() {
        handle(job, &mut summary);
    }
    let mut spilled: Vec<PathBuf> = match std::fs::read_dir(&spill_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    spilled.sort();
    if !spilled.is_empty() {
        info!(count = spilled.len(), "dispatching spilled packets");
    }
    for path in spilled {
        let job = std::fs::read(&path)
            .ok()
            .and_then(|b| serde_json::from_slice::<Job>(&b).ok());
        match job {
            Some(job) => {
                handle(job, &mut summary);
                let _ = std::fs::remove_file(&path);
            }
            None => warn!(path = %path.display(), "unreadable spill entry left in place"),
        }
    }
    summary
}
