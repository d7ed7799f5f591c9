//! In-process chat-completions endpoint serving canned reports.

use super::ReasonerError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;
use tracing::{debug, info};

/// Canned reply bodies. Either a plain list served round-robin, or a
/// table keyed by ego vehicle class with a round-robin fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockResponses {
    List(Vec<Value>),
    Table {
        #[serde(default)]
        by_class: BTreeMap<String, Value>,
        #[serde(default)]
        default: Vec<Value>,
    },
}

impl Default for MockResponses {
    fn default() -> Self {
        Self::List(vec![json!({
            "incident_type": "abnormal stopping",
            "secondary_type": "sudden stop",
            "entities": [{ "vehicle_type": "car", "role": "stopped vehicle" }],
            "narrative": "A vehicle decelerates sharply and stops in a travel lane.",
        })])
    }
}

impl MockResponses {
    pub fn load(path: &std::path::Path) -> Result<Self, ReasonerError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| ReasonerError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MockConfig {
    pub responses: MockResponses,
    pub latency: Duration,
    /// Probability that a request is answered with HTTP 500.
    pub failure_rate: f64,
    pub seed: u64,
}

struct Shared {
    config: MockConfig,
    counter: AtomicU64,
    rng: Mutex<ChaCha8Rng>,
}

/// Running mock endpoint; stops when dropped.
pub struct MockServer {
    addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    stop: Arc<AtomicBool>,
    requests: Arc<AtomicU64>,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds `127.0.0.1:port` (`0` picks a free port).
    pub fn start(port: u16, config: MockConfig) -> Result<Self, ReasonerError> {
        Self::start_on(&format!("127.0.0.1:{port}"), config)
    }

    pub fn start_on(addr: &str, config: MockConfig) -> Result<Self, ReasonerError> {
        let server = tiny_http::Server::http(addr)
            .map_err(|e| ReasonerError::Bind(format!("{addr}: {e}")))?;
        let bound = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| ReasonerError::Bind(format!("{addr}: not an IP listener")))?;
        let server = Arc::new(server);
        let stop = Arc::new(AtomicBool::new(false));
        let requests = Arc::new(AtomicU64::new(0));
        let shared = Arc::new(Shared {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(config.seed)),
            config,
            counter: AtomicU64::new(0),
        });
        let (srv, stop2, req2) = (server.clone(), stop.clone(), requests.clone());
        let handle = std::thread::Builder::new()
            .name("mock-reasoner".into())
            .spawn(move || {
                while !stop2.load(Ordering::Relaxed) {
                    match srv.recv_timeout(Duration::from_millis(50)) {
                        Ok(Some(req)) => {
                            req2.fetch_add(1, Ordering::Relaxed);
                            let shared = shared.clone();
                            std::thread::spawn(move || serve(req, &shared));
                        }
                        Ok(None) => {}
                        Err(_) => break,
                    }
                }
            })?;
        info!(%bound, "mock reasoner listening");
        Ok(Self {
            addr: bound,
            server,
            stop,
            requests,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Full chat-completions URL.
    pub fn url(&self) -> String {
        format!("http://{}/v1/chat/completions", self.addr)
    }

    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    /// Blocks the calling thread until the server stops.
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Class named after `ego vehicle class:` in any text part of the request.
fn ego_class(body: &Value) -> Option<String> {
    let mut texts = Vec::new();
    for msg in body["messages"].as_array().into_iter().flatten() {
        match &msg["content"] {
            Value::String(s) => texts.push(s.as_str()),
            Value::Array(parts) => texts.extend(parts.iter().filter_map(|p| p["text"].as_str())),
            _ => {}
        }
    }
    const KEY: &str = "ego vehicle class:";
    texts.iter().find_map(|t| {
        let lower = t.to_lowercase();
        let at = lower.find(KEY)? + KEY.len();
        let word: String = lower[at..]
            .trim_start()
            .chars()
            .take_while(|c| c.is_alphanumeric() || *c == '_' || *c == '-')
            .collect();
        (!word.is_empty()).then_some(word)
    })
}

fn pick(shared: &Shared, body: &Value) -> Value {
    let n = shared.counter.fetch_add(1, Ordering::Relaxed) as usize;
    match &shared.config.responses {
        MockResponses::List(list) if !list.is_empty() => list[n % list.len()].clone(),
        MockResponses::Table { by_class, default } => {
            if let Some(v) = ego_class(body).and_then(|c| by_class.get(&c)) {
                return v.clone();
            }
            if default.is_empty() {
                MockResponses::default().first()
            } else {
                default[n % default.len()].clone()
            }
        }
        MockResponses::List(_) => MockResponses::default().first(),
    }
}

impl MockResponses {
    fn first(&self) -> Value {
        match self {
            Self::List(l) => l.first().cloned().unwrap_or(Value::Null),
            Self::Table { default, .. } => default.first().cloned().unwrap_or(Value::Null),
        }
    }
}

fn serve(mut req: tiny_http::Request, shared: &Shared) {
    let json_header =
        tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
    let respond = |req: tiny_http::Request, code: u16, body: String| {
        let _ = req.respond(
            tiny_http::Response::from_string(body)
                .with_status_code(code)
                .with_header(json_header.clone()),
        );
    };
    if !shared.config.latency.is_zero() {
        std::thread::sleep(shared.config.latency);
    }
    if *req.method() != tiny_http::Method::Post || !req.url().ends_with("/chat/completions") {
        return respond(req, 404, json!({"error": "not found"}).to_string());
    }
    let mut text = String::new();
    if req.as_reader().read_to_string(&mut text).is_err() {
        return respond(req, 400, json!({"error": "unreadable body"}).to_string());
    }
    let fail = {
        let mut rng = shared.rng.lock().unwrap_or_else(|p| p.into_inner());
        shared.config.failure_rate > 0.0 && rng.random::<f64>() < shared.config.failure_rate
    };
    if fail {
        debug!("injected failure");
        return respond(req, 500, json!({"error": "injected failure"}).to_string());
    }
    let body: Value = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(e) => return respond(req, 400, json!({"error": e.to_string()}).to_string()),
    };
    let reply = pick(shared, &body);
    let content = match reply {
        Value::String(s) => s,
        other => other.to_string(),
    };
    let n = shared.counter.load(Ordering::Relaxed);
    let out = json!({
        "id": format!("mock-{n}"),
        "object": "chat.completion",
        "created": 0,
        "model": body["model"].as_str().unwrap_or("mock"),
        "choices": [{
            "index": 0,
            "message": { "role": "assistant", "content": content },
            "finish_reason": "stop",
        }],
    });
    respond(req, 200, out.to_string());
}
