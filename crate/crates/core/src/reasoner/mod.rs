//! Client side of the vision-language stage: prompt and payload
//! construction from trigger packets, tolerant report parsing, and an
//! asynchronous dispatcher with retry and spill-to-disk overflow.

mod dispatch;
mod mock;

pub use dispatch::{
    dispatch_packet, extract_message_content, DispatchSummary, Dispatcher, Drain, HttpTransport,
    IncidentLog, IncidentRecord, Submit, Transport, TransportError, API_KEY_ENV,
};
pub use mock::{MockConfig, MockResponses, MockServer};

use crate::localization::TriggerPacket;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReasonerError {
    #[error("invalid reasoner config: {0}")]
    Config(String),

    #[error("packet {0} has no crops; reasoning skipped")]
    NoCrops(String),

    #[error("reading crop {path}: {source}")]
    Crop {
        path: String,
        source: std::io::Error,
    },

    #[error("mock server: {0}")]
    Bind(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const DEFAULT_PROMPT: &str = "\
You are a traffic incident analyst reviewing footage from a fixed expressway camera.
The images are consecutive crops, oldest first, around a vehicle whose motion deviated from the surrounding traffic flow at frame {t_a}.
Ego vehicle class: {ego_class}. Vehicles in view: {members}.
{diagnostics}
Classify the event. Reply with exactly one JSON object and nothing else, using the keys \
\"incident_type\" (string, e.g. \"abnormal stopping\", \"dangerous driving\", \"traffic accident\"), \
\"secondary_type\" (string, a finer category such as \"sudden stop\", \"swerving\", \"speeding\", \"wrong-way driving\", \"collision\"), \
\"entities\" (array of objects with \"vehicle_type\" and \"role\"), and \"narrative\" (one or two sentences).";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReasonerConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub max_crops: usize,
    pub prompt_template: String,
    /// Embed scores and effective velocities in the prompt.
    pub include_diagnostics: bool,
    pub queue_capacity: usize,
    /// Base delay of the exponential retry backoff.
    pub backoff_ms: u64,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8089/v1/chat/completions".into(),
            model: "vlm".into(),
            timeout_s: 60.0,
            max_retries: 3,
            max_crops: 8,
            prompt_template: DEFAULT_PROMPT.into(),
            include_diagnostics: true,
            queue_capacity: 16,
            backoff_ms: 500,
        }
    }
}

impl ReasonerConfig {
    pub fn validate(&self) -> Result<(), ReasonerError> {
        if self.max_crops < 1 {
            return Err(ReasonerError::Config("max_crops must be >= 1".into()));
        }
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(ReasonerError::Config(format!(
                "timeout_s = {} must be > 0",
                self.timeout_s
            )));
        }
        if self.queue_capacity < 1 {
            return Err(ReasonerError::Config("queue_capacity must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Entity {
    #[serde(default)]
    pub vehicle_type: String,
    #[serde(default)]
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IncidentReport {
    pub incident_type: String,
    #[serde(default)]
    pub secondary_type: String,
    #[serde(default)]
    pub entities: Vec<Entity>,
    #[serde(default)]
    pub narrative: String,
    #[serde(default)]
    pub packet_id: String,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{reason}")]
pub struct ParseFailure {
    pub reason: String,
    pub raw: String,
}

/// Indices of at most `k` items out of `n`, spread uniformly on both sides of
/// `anchor` and always including it. The `k - 1` free slots are split between
/// the two sides in proportion to their lengths (half rounds toward the
/// past); each side is then sampled at rounded even steps, the far ends
/// included.
pub fn select_frames(n: usize, anchor: usize, k: usize) -> Vec<usize> {
    assert!(anchor < n, "anchor {anchor} out of range for {n} items");
    if n <= k {
        return (0..n).collect();
    }
    if k <= 1 {
        return vec![anchor];
    }
    let slots = k - 1;
    let (before, after) = (anchor, n - 1 - anchor);
    let mut b = ((slots * before) as f64 / (before + after) as f64 + 0.5).floor() as usize;
    b = b.min(before);
    let mut a = slots - b;
    if a > after {
        a = after;
        b = (slots - a).min(before);
    }
    let mut out = Vec::with_capacity(k);
    for i in 0..b {
        out.push((i as f64 * before as f64 / b as f64).round() as usize);
    }
    out.push(anchor);
    for j in 1..=a {
        out.push(anchor + (j as f64 * after as f64 / a as f64).round() as usize);
    }
    out
}

/// Fixed-point rendering with at most three decimals.
fn fmt_num(x: f64) -> String {
    let s = format!("{x:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

pub fn diagnostics_text(packet: &TriggerPacket) -> String {
    let d = &packet.diagnostics;
    format!(
        "Kinematic context: surprise s_ego={} (longitudinal {}, lateral {}); effective longitudinal velocity {} px/frame against an expected {} +/- {}; peak lateral velocity {} px/frame.",
        fmt_num(packet.scores.s_ego),
        fmt_num(packet.scores.s_par),
        fmt_num(packet.scores.s_perp),
        fmt_num(d.v_par_eff),
        fmt_num(d.posterior.mu_post_par),
        fmt_num(d.posterior.sigma_post_par),
        fmt_num(d.v_perp_eff),
    )
}

/// Substitutes `{name}` placeholders; unknown braces are left untouched.
pub fn render_prompt(template: &str, packet: &TriggerPacket, include_diagnostics: bool) -> String {
    let members = packet
        .member_ids
        .iter()
        .map(|m| m.to_string())
        .collect::<Vec<_>>()
        .join(", ");
    let diag = if include_diagnostics {
        diagnostics_text(packet)
    } else {
        String::new()
    };
    let vars: [(&str, String); 11] = [
        ("t_a", packet.t_a.to_string()),
        ("ego_id", packet.ego_id.to_string()),
        ("ego_class", packet.ego_class.clone()),
        ("members", members),
        ("s", fmt_num(packet.scores.s_ego)),
        ("s_ego", fmt_num(packet.scores.s_ego)),
        ("s_par", fmt_num(packet.scores.s_par)),
        ("s_perp", fmt_num(packet.scores.s_perp)),
        ("v_par", fmt_num(packet.diagnostics.v_par_eff)),
        ("v_perp", fmt_num(packet.diagnostics.v_perp_eff)),
        ("diagnostics", diag),
    ];
    let mut out = String::with_capacity(template.len() + 128);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open + 1..];
        let hit = tail.find('}').and_then(|close| {
            let name = &tail[..close];
            vars.iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (v, close))
        });
        match hit {
            Some((v, close)) => {
                out.push_str(v);
                rest = &tail[close + 1..];
            }
            None => {
                out.push('{');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Request body plus the frames it carries.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestPayload {
    pub body: Value,
    pub frames: Vec<u64>,
}

/// Chat-completions vision request for the packet stored in `dir`.
pub fn build_request(
    packet: &TriggerPacket,
    dir: &Path,
    config: &ReasonerConfig,
) -> Result<RequestPayload, ReasonerError> {
    let available: Vec<(u64, &str)> = packet.crop_files().map(|(c, f)| (c.frame, f)).collect();
    if available.is_empty() {
        return Err(ReasonerError::NoCrops(packet.packet_id.clone()));
    }
    let anchor = available
        .iter()
        .enumerate()
        .min_by_key(|(_, (f, _))| f.abs_diff(packet.t_a))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let picks = select_frames(available.len(), anchor, config.max_crops);

    let mut content = vec![json!({
        "type": "text",
        "text": render_prompt(&config.prompt_template, packet, config.include_diagnostics),
    })];
    let mut frames = Vec::with_capacity(picks.len());
    for i in picks {
        let (frame, file) = available[i];
        let path = dir.join(file);
        let bytes = std::fs::read(&path).map_err(|source| ReasonerError::Crop {
            path: path.display().to_string(),
            source,
        })?;
        let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
        content.push(json!({
            "type": "image_url",
            "image_url": { "url": format!("data:image/png;base64,{b64}") },
        }));
        frames.push(frame);
    }
    let body = json!({
        "model": config.model,
        "temperature": 0,
        "max_tokens": 512,
        "messages": [{ "role": "user", "content": content }],
    });
    Ok(RequestPayload { body, frames })
}

fn str_field(obj: &serde_json::Map<String, Value>, key: &str) -> String {
    match obj.get(key) {
        Some(Value::String(s)) => s.trim().to_string(),
        Some(Value::Null) | None => String::new(),
        Some(other) => other.to_string(),
    }
}

fn report_from(obj: &serde_json::Map<String, Value>, raw: &str) -> Option<IncidentReport> {
    let incident_type = str_field(obj, "incident_type");
    if incident_type.is_empty() {
        return None;
    }
    let entities = match obj.get("entities") {
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(|e| match e {
                Value::Object(o) => Some(Entity {
                    vehicle_type: str_field(o, "vehicle_type"),
                    role: str_field(o, "role"),
                }),
                Value::String(s) => Some(Entity {
                    vehicle_type: s.clone(),
                    role: String::new(),
                }),
                _ => None,
            })
            .collect(),
        _ => Vec::new(),
    };
    Some(IncidentReport {
        incident_type,
        secondary_type: str_field(obj, "secondary_type"),
        entities,
        narrative: str_field(obj, "narrative"),
        raw: raw.to_string(),
        ..Default::default()
    })
}

/// First well-formed JSON object carrying a non-empty `incident_type`,
/// wherever it sits in the text (prose and code fences are skipped).
pub fn parse_report(text: &str) -> Result<IncidentReport, ParseFailure> {
    let mut saw_object = false;
    for (i, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(obj))) = stream.next() {
            saw_object = true;
            if let Some(r) = report_from(&obj, text) {
                return Ok(r);
            }
        }
    }
    let reason = if saw_object {
        "no object with a non-empty incident_type"
    } else {
        "no JSON object in response"
    };
    Err(ParseFailure {
        reason: reason.into(),
        raw: text.to_string(),
    })
}
