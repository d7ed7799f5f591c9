//! Metrics over run outputs: event recall, frame-level AUC-ROC, query rate,
//! effective frame rate, and semantic accuracy of reasoner reports.

use crate::localization::TriggerPacket;
use crate::pipeline::{self, PipelineError, RunStats, ScoreRecord};
use crate::reasoner::{IncidentRecord, IncidentReport};
use crate::simulator::{GroundTruth, GtEvent};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;
use thiserror::Error;

pub const DEFAULT_TOL: u64 = 20;
pub const REPORT_FILE: &str = "eval_report.json";
pub const TIMELINE_FILE: &str = "score_timeline.svg";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC undefined: {positives} anomalous and {negatives} normal frames")]
    SingleClass { positives: usize, negatives: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error(transparent)]
    Run(#[from] PipelineError),

    #[error("reading {path}: {reason}")]
    Read { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventMatch {
    pub onset: u64,
    /// Last anomalous frame.
    pub last: u64,
    pub kind: String,
    pub vehicle: u64,
    pub class: String,
    pub packet_id: Option<String>,
    pub t_a: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub matches: Vec<EventMatch>,
    pub recall: f64,
    /// Packets not assigned to any event.
    pub unmatched_packets: usize,
}

fn gap(t: u64, lo: u64, hi: u64) -> u64 {
    if t < lo {
        lo - t
    } else {
        t.saturating_sub(hi)
    }
}

/// Matches packets to ground-truth events. An event can be claimed by a
/// packet on the event's vehicle whose trigger frame lies within
/// `[onset - tol, last + tol]`; each packet claims at most one event.
/// Pairs are assigned greedily by temporal distance, then augmenting paths
/// raise the assignment to maximum cardinality so recall never drops as
/// `tol` grows. With no events recall is 1.
pub fn match_events(packets: &[TriggerPacket], gt: &GroundTruth, tol: u64) -> MatchResult {
    let n_ev = gt.events.len();
    let mut adj: Vec<Vec<(u64, usize)>> = vec![vec![]; n_ev];
    for (i, e) in gt.events.iter().enumerate() {
        let last = e.end.saturating_sub(1).max(e.onset);
        for (j, p) in packets.iter().enumerate() {
            if p.ego_id == e.vehicle && p.t_a + tol >= e.onset && p.t_a <= last + tol {
                adj[i].push((gap(p.t_a, e.onset, last), j));
            }
        }
        adj[i].sort_unstable();
    }
    let mut edges: Vec<(u64, usize, usize)> = adj
        .iter()
        .enumerate()
        .flat_map(|(i, v)| v.iter().map(move |&(d, j)| (d, i, j)))
        .collect();
    edges.sort_unstable();
    let mut ev_to: Vec<Option<usize>> = vec![None; n_ev];
    let mut pk_to: Vec<Option<usize>> = vec![None; packets.len()];
    for (_, i, j) in edges {
        if ev_to[i].is_none() && pk_to[j].is_none() {
            ev_to[i] = Some(j);
            pk_to[j] = Some(i);
        }
    }
    fn augment(
        i: usize,
        adj: &[Vec<(u64, usize)>],
        seen: &mut [bool],
        ev_to: &mut [Option<usize>],
        pk_to: &mut [Option<usize>],
    ) -> bool {
        for &(_, j) in &adj[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            if pk_to[j].is_none_or(|k| augment(k, adj, seen, ev_to, pk_to)) {
                ev_to[i] = Some(j);
                pk_to[j] = Some(i);
                return true;
            }
        }
        false
    }
    for i in 0..n_ev {
        if ev_to[i].is_none() {
            let mut seen = vec![false; packets.len()];
            augment(i, &adj, &mut seen, &mut ev_to, &mut pk_to);
        }
    }

    let matches: Vec<EventMatch> = gt
        .events
        .iter()
        .zip(&ev_to)
        .map(|(e, m)| EventMatch {
            onset: e.onset,
            last: e.end.saturating_sub(1).max(e.onset),
            kind: e.kind.as_str().to_string(),
            vehicle: e.vehicle,
            class: e.class.clone(),
            packet_id: m.map(|j| packets[j].packet_id.clone()),
            t_a: m.map(|j| packets[j].t_a),
        })
        .collect();
    let hit = matches.iter().filter(|m| m.packet_id.is_some()).count();
    MatchResult {
        recall: if n_ev == 0 {
            1.0
        } else {
            hit as f64 / n_ev as f64
        },
        unmatched_packets: pk_to.iter().filter(|m| m.is_none()).count(),
        matches,
    }
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Input(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(EvalError::Input(format!("score {s} is not a number")));
    }
    let positives = labels.iter().filter(|l| **l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass {
            positives,
            negatives,
        });
    }
    Ok((positives, negatives))
}

/// Probability that an anomalous frame outscores a normal one, ties
/// counting one half, via tie-averaged ranks in O(n log n).
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let (p, n) = check_inputs(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives, kept in integers so the result is exact
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let pos = idx[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        // 1-based ranks i+1..=j+1 average to (i+j+2)/2
        twice_rank_sum += pos * (i + j + 2) as u128;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - (p as u128) * (p as u128 + 1);
    Ok(twice_u as f64 / (2 * p as u128 * n as u128) as f64)
}

/// Reference implementation over all anomalous/normal pairs.
pub fn auc_roc_pairwise(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    let (p, n) = check_inputs(scores, labels)?;
    let mut twice: u128 = 0;
    for (a, _) in scores.iter().zip(labels).filter(|(_, l)| **l) {
        for (b, _) in scores.iter().zip(labels).filter(|(_, l)| !**l) {
            twice += match a.partial_cmp(b).expect("NaN rejected above") {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    Ok(twice as f64 / (2 * p as u128 * n as u128) as f64)
}

/// Per-frame anomaly score: the largest ego score of any track at that
/// frame, 0 where no track was scored.
pub fn frame_scores(records: &[ScoreRecord], total_frames: u64) -> Vec<f64> {
    let mut out = vec![0.0; total_frames as usize];
    for r in records {
        if let Some(s) = out.get_mut(r.frame as usize) {
            *s = f64::max(*s, r.s_ego);
        }
    }
    out
}

/// `(lqr, efps)`: share of frames sent to the reasoner, and frames per
/// second of scoring plus reasoning wall time.
pub fn lqr_efps(
    total_frames: u64,
    frames_sent: u64,
    scoring_wall_s: f64,
    reasoner_wall_s: f64,
) -> Result<(f64, f64), EvalError> {
    if total_frames == 0 {
        return Err(EvalError::Input("no frames processed".into()));
    }
    let wall = scoring_wall_s + reasoner_wall_s;
    if !(wall > 0.0) {
        return Err(EvalError::Input(format!(
            "wall time {wall} s must be positive"
        )));
    }
    Ok((
        (frames_sent.min(total_frames)) as f64 / total_frames as f64,
        total_frames as f64 / wall,
    ))
}

/// Frames below `total_frames` covered by the union of packet windows.
pub fn window_frames(packets: &[TriggerPacket], total_frames: u64) -> u64 {
    let mut set = BTreeSet::new();
    for p in packets {
        set.extend(p.window[0]..=p.window[1].min(total_frames.saturating_sub(1)));
    }
    set.range(..total_frames).count() as u64
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SynonymTable {
    pub events: BTreeMap<String, Vec<String>>,
    pub vehicles: BTreeMap<String, Vec<String>>,
}

fn normalize(s: &str) -> String {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Word-bounded containment after normalization.
fn mentions(text: &str, phrase: &str) -> bool {
    let (t, p) = (normalize(text), normalize(phrase));
    !p.is_empty() && format!(" {t} ").contains(&format!(" {p} "))
}

impl SynonymTable {
    pub fn builtin() -> &'static SynonymTable {
        static TABLE: OnceLock<SynonymTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            serde_json::from_str(include_str!("../data/event_synonyms.json"))
                .expect("bundled synonym table parses")
        })
    }

    fn matches(map: &BTreeMap<String, Vec<String>>, text: &str, key: &str) -> bool {
        let key_n = normalize(key);
        if mentions(text, &key_n) {
            return true;
        }
        map.iter()
            .filter(|(k, _)| normalize(k) == key_n)
            .flat_map(|(_, v)| v)
            .any(|syn| mentions(text, syn))
    }

    pub fn event_matches(&self, text: &str, kind: &str) -> bool {
        Self::matches(&self.events, text, kind)
    }

    pub fn vehicle_matches(&self, text: &str, class: &str) -> bool {
        Self::matches(&self.vehicles, text, class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemanticScore {
    pub event: bool,
    pub detail: bool,
}

/// Event: primary or secondary type names the event kind. Detail: some
/// entity's vehicle type names the ground-truth class.
pub fn score_report(
    report: &IncidentReport,
    event: &GtEvent,
    table: &SynonymTable,
) -> SemanticScore {
    let kind = event.kind.as_str();
    SemanticScore {
        event: table.event_matches(&report.incident_type, kind)
            || table.event_matches(&report.secondary_type, kind),
        detail: report
            .entities
            .iter()
            .any(|e| table.vehicle_matches(&e.vehicle_type, &event.class)),
    }
}

/// `(event_acc, detail_acc)` over reports aligned to matched events; `None`
/// for an empty list.
pub fn semantic_accuracy(
    aligned: &[(&IncidentReport, &GtEvent)],
    table: &SynonymTable,
) -> Option<(f64, f64)> {
    if aligned.is_empty() {
        return None;
    }
    let scores: Vec<SemanticScore> = aligned
        .iter()
        .map(|(r, e)| score_report(r, e, table))
        .collect();
    let n = scores.len() as f64;
    Some((
        scores.iter().filter(|s| s.event).count() as f64 / n,
        scores.iter().filter(|s| s.detail).count() as f64 / n,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall: f64,
    /// Absent when the run has only one frame class (e.g. no anomalies).
    pub auc_roc: Option<f64>,
    pub lqr: f64,
    /// Frames per second of scoring plus reasoner wall time.
    pub efps: f64,
    /// Frames per second of the streaming loop alone.
    pub scoring_efps: f64,
    pub event_acc: Option<f64>,
    pub detail_acc: Option<f64>,
    pub tol: u64,
    pub frames: u64,
    pub packets: usize,
    pub unmatched_packets: usize,
    pub window_frames: u64,
    pub events: Vec<EventMatch>,
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Read {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| EvalError::Read {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn load_run_stats(run_dir: &Path) -> Result<RunStats, EvalError> {
    let path = run_dir.join(pipeline::STATS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| EvalError::Read {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| EvalError::Read {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Evaluates a run directory against ground truth. Reports, when given,
/// are aligned to events through the matched packet id.
pub fn evaluate(
    run_dir: &Path,
    gt: &GroundTruth,
    reports: Option<&[IncidentRecord]>,
    tol: u64,
) -> Result<EvalReport, EvalError> {
    let stats = load_run_stats(run_dir)?;
    let packets = pipeline::load_packets(run_dir)?;
    let records = pipeline::read_scores(&run_dir.join(pipeline::SCORES_FILE))?;
    let total = gt.duration.max(stats.total_frames);
    let matched = match_events(&packets, gt, tol);

    let labels = gt_frame_labels(gt, total);
    let scores = frame_scores(&records, total);
    let auc_roc = match auc_roc(&scores, &labels) {
        Ok(a) => Some(a),
        Err(EvalError::SingleClass { .. }) => None,
        Err(e) => return Err(e),
    };

    let sent = window_frames(&packets, total);
    let scoring_wall = stats.wall_s.max(f64::MIN_POSITIVE);
    let reasoner_wall = stats.dispatch.map_or(0.0, |d| d.reasoner_wall_s);
    let (lqr, efps) = lqr_efps(total.max(1), sent, scoring_wall, reasoner_wall)?;

    let (event_acc, detail_acc) = match reports {
        Some(recs) => {
            let by_id: BTreeMap<&str, &IncidentReport> = recs
                .iter()
                .filter_map(|r| r.report().map(|rep| (r.packet_id(), rep)))
                .collect();
            let aligned: Vec<(&IncidentReport, &GtEvent)> = gt
                .events
                .iter()
                .zip(&matched.matches)
                .filter_map(|(e, m)| Some((*by_id.get(m.packet_id.as_deref()?)?, e)))
                .collect();
            semantic_accuracy(&aligned, SynonymTable::builtin()).unzip()
        }
        None => (None, None),
    };

    Ok(EvalReport {
        recall: matched.recall,
        auc_roc,
        lqr,
        efps,
        scoring_efps: stats.efps,
        event_acc,
        detail_acc,
        tol,
        frames: total,
        packets: packets.len(),
        unmatched_packets: matched.unmatched_packets,
        window_frames: sent,
        events: matched.matches,
    })
}

fn gt_frame_labels(gt: &GroundTruth, total: u64) -> Vec<bool> {
    let mut labels = GroundTruth {
        duration: total,
        events: gt.events.clone(),
    }
    .frame_labels();
    labels.truncate(total as usize);
    labels
}

/// Score timeline: per-frame score as a line, ground-truth intervals shaded,
/// trigger frames as vertical marks.
pub fn timeline_svg(scores: &[f64], gt: &GroundTruth, packets: &[TriggerPacket]) -> String {
    let (w, h, m) = (960.0, 240.0, 30.0);
    let n = scores.len().max(1) as f64;
    let top = scores.iter().copied().fold(1.0f64, f64::max);
    let x = |t: f64| m + (w - 2.0 * m) * t / n;
    let y = |s: f64| h - m - (h - 2.0 * m) * s / top;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r##"<rect width="{w}" height="{h}" fill="#ffffff"/>"##);
    for e in &gt.events {
        let _ = writeln!(
            svg,
            r##"<rect x="{:.1}" y="{m}" width="{:.1}" height="{:.1}" fill="#f4c7c3"><title>{} vehicle {}</title></rect>"##,
            x(e.onset as f64),
            (x(e.end as f64) - x(e.onset as f64)).max(1.0),
            h - 2.0 * m,
            e.kind.as_str(),
            e.vehicle
        );
    }
    for p in packets {
        let px = x(p.t_a as f64);
        let _ = writeln!(
            svg,
            r##"<line x1="{px:.1}" y1="{m}" x2="{px:.1}" y2="{:.1}" stroke="#d93025" stroke-dasharray="3,2"><title>{}</title></line>"##,
            h - m,
            p.packet_id
        );
    }
    let points: Vec<String> = scores
        .iter()
        .enumerate()
        .map(|(t, s)| format!("{:.1},{:.1}", x(t as f64), y(*s)))
        .collect();
    let _ = writeln!(
        svg,
        r##"<polyline fill="none" stroke="#1a73e8" stroke-width="1" points="{}"/>"##,
        points.join(" ")
    );
    let _ = writeln!(
        svg,
        r##"<line x1="{m}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#000000"/>"##,
        h - m,
        w - m,
        h - m
    );
    let _ = writeln!(
        svg,
        r##"<text x="{m}" y="{:.1}" font-size="11">frame 0</text>"##,
        h - 8.0
    );
    let _ = writeln!(
        svg,
        r##"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">frame {}</text>"##,
        w - m,
        h - 8.0,
        scores.len()
    );
    let _ = writeln!(
        svg,
        r##"<text x="4" y="{:.1}" font-size="11">max {top:.2}</text>"##,
        m - 6.0
    );
    svg.push_str("</svg>\n");
    svg
}
