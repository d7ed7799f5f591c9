//! Trigger generation and spatiotemporal localization.
//!
//! A positive surprise opens a packet around the ego: the temporal window
//! `[t_a - tau_p, t_a + tau_f]`, the neighbourhood members at `t_a`, and for
//! every frame of the window the smallest box enclosing all members present
//! in that frame. Packets complete only once the future edge of the window
//! has been observed, so the scoring loop never looks ahead.

use crate::bayes::{Posterior, SurpriseScore};
use crate::geom::BBox;
use crate::ingest::{write_png, FrameSource, IngestError, PixelRect};
use crate::kinematics::Tracker;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use thiserror::Error;
use tracing::{debug, warn};

#[derive(Debug, Error)]
pub enum LocalizationError {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("frame source: {0}")]
    Frame(#[from] IngestError),

    #[error("writing packet: {0}")]
    Io(#[from] std::io::Error),

    #[error("encoding crop for frame {frame}: {reason}")]
    Encode { frame: u64, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocConfig {
    pub tau_p: u64,
    pub tau_f: u64,
    pub tau_cool: u64,
    pub pad: f64,
}

impl Default for LocConfig {
    fn default() -> Self {
        Self {
            tau_p: 20,
            tau_f: 20,
            tau_cool: 50,
            pad: 0.1,
        }
    }
}

impl LocConfig {
    pub fn validate(&self) -> Result<(), LocalizationError> {
        if !(self.pad >= 0.0 && self.pad.is_finite()) {
            return Err(LocalizationError::Parameter(format!(
                "pad = {} must be >= 0",
                self.pad
            )));
        }
        Ok(())
    }
}

/// Positive score outside the per-track refractory period.
pub fn should_trigger(
    score: &SurpriseScore,
    last_trigger: Option<u64>,
    tau_cool: u64,
    t: u64,
) -> bool {
    score.s_ego > 0.0 && last_trigger.is_none_or(|last| t.saturating_sub(last) >= tau_cool)
}

/// Corner-wise min/max of `boxes`, padded by `pad * max(width, height)` per
/// side. Padding is clipped at the frame edges but never cuts into the
/// enclosed boxes themselves.
pub fn enclosing_box(
    boxes: &[BBox],
    pad: f64,
    frame_w: u32,
    frame_h: u32,
) -> Result<BBox, LocalizationError> {
    let (first, rest) = boxes
        .split_first()
        .ok_or_else(|| LocalizationError::Parameter("enclosing box of an empty set".into()))?;
    let tight = rest.iter().fold(*first, |acc, b| acc.union(b));
    if pad == 0.0 {
        return Ok(tight);
    }
    let m = pad * tight.width().max(tight.height());
    let (w, h) = (frame_w as f64, frame_h as f64);
    Ok(BBox {
        x_min: (tight.x_min - m).max(tight.x_min.min(0.0)),
        y_min: (tight.y_min - m).max(tight.y_min.min(0.0)),
        x_max: (tight.x_max + m).min(tight.x_max.max(w)),
        y_max: (tight.y_max + m).min(tight.y_max.max(h)),
    })
}

/// Kinematic context carried with a packet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub v_par_eff: f64,
    pub v_perp_eff: f64,
    pub var_perp: f64,
    pub posterior: Posterior,
}

/// A positive-surprise event before its window is complete.
#[derive(Debug, Clone, PartialEq)]
pub struct Trigger {
    pub t_a: u64,
    pub ego_id: u64,
    pub ego_class: String,
    /// Ego plus its neighbourhood at `t_a`, sorted.
    pub member_ids: Vec<u64>,
    pub scores: SurpriseScore,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropEntry {
    pub frame: u64,
    pub bbox: BBox,
    /// Crop image file name inside the packet directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerPacket {
    pub packet_id: String,
    pub camera_id: String,
    pub t_a: u64,
    pub ego_id: u64,
    pub ego_class: String,
    pub member_ids: Vec<u64>,
    /// Inclusive frame range.
    pub window: [u64; 2],
    pub crops: Vec<CropEntry>,
    pub scores: SurpriseScore,
    pub diagnostics: Diagnostics,
    /// The stream ended before the future edge of the window.
    #[serde(default)]
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub const PACKET_MANIFEST: &str = "manifest.json";

pub fn packet_id(t_a: u64, ego_id: u64) -> String {
    format!("t{t_a:06}_e{ego_id}")
}

impl TriggerPacket {
    pub fn window_len(&self) -> u64 {
        self.window[1] - self.window[0] + 1
    }

    pub fn crop_at(&self, frame: u64) -> Option<&CropEntry> {
        self.crops.iter().find(|c| c.frame == frame)
    }

    pub fn crop_files(&self) -> impl Iterator<Item = (&CropEntry, &str)> {
        self.crops
            .iter()
            .filter_map(|c| c.file.as_deref().map(|f| (c, f)))
    }

    /// Resolves every crop of the window from `source`, writes them as PNG
    /// files next to the manifest and records the file names. Frames the
    /// source cannot provide are left without a file.
    pub fn write(
        &mut self,
        dir: &Path,
        source: Option<&dyn FrameSource>,
    ) -> Result<(), LocalizationError> {
        std::fs::create_dir_all(dir)?;
        if let Some(source) = source {
            let (w, h) = source.dims();
            for crop in &mut self.crops {
                let Some(rect) = PixelRect::covering(&crop.bbox, w, h) else {
                    continue;
                };
                let Some(img) = source.resolve_region(crop.frame, rect)? else {
                    continue;
                };
                let name = format!("crop_{:06}.png", crop.frame);
                write_png(&img, &dir.join(&name)).map_err(|e| LocalizationError::Encode {
                    frame: crop.frame,
                    reason: e.to_string(),
                })?;
                crop.file = Some(name);
            }
        }
        if self.crop_files().next().is_none() && !self.warnings.iter().any(|w| w == WARN_NO_FRAMES)
        {
            warn!(packet = %self.packet_id, "no frames resolvable in window; reasoning skipped");
            self.warnings.push(WARN_NO_FRAMES.to_string());
        }
        let f = std::fs::File::create(dir.join(PACKET_MANIFEST))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)
            .map_err(std::io::Error::other)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, LocalizationError> {
        let text = std::fs::read_to_string(dir.join(PACKET_MANIFEST))?;
        serde_json::from_str(&text).map_err(|e| LocalizationError::Io(std::io::Error::other(e)))
    }
}

pub const WARN_NO_FRAMES: &str = "no_frames";

/// Builds the packet from the member boxes seen in each frame of `window`.
/// Frames where no member is present reuse the nearest available box
/// (earlier frame on ties).
pub fn assemble_packet(
    trigger: &Trigger,
    camera_id: &str,
    member_boxes: &BTreeMap<u64, Vec<BBox>>,
    window: [u64; 2],
    pad: f64,
    frame_dims: (u32, u32),
    truncated: bool,
) -> Result<TriggerPacket, LocalizationError> {
    let mut local: BTreeMap<u64, BBox> = BTreeMap::new();
    for (&t, boxes) in member_boxes.range(window[0]..=window[1]) {
        if !boxes.is_empty() {
            local.insert(t, enclosing_box(boxes, pad, frame_dims.0, frame_dims.1)?);
        }
    }
    if local.is_empty() {
        return Err(LocalizationError::Parameter(format!(
            "no member of packet {} observed in its window",
            packet_id(trigger.t_a, trigger.ego_id)
        )));
    }
    let crops = (window[0]..=window[1])
        .map(|t| {
            let bbox = match local.get(&t) {
                Some(b) => *b,
                None => {
                    let before = local.range(..t).next_back();
                    let after = local.range(t..).next();
                    match (before, after) {
                        (Some((tb, b)), Some((ta, a))) => {
                            if t - tb <= ta - t {
                                *b
                            } else {
                                *a
                            }
                        }
                        (Some((_, b)), None) => *b,
                        (None, Some((_, a))) => *a,
                        (None, None) => unreachable!("local is non-empty"),
                    }
                }
            };
            CropEntry {
                frame: t,
                bbox,
                file: None,
            }
        })
        .collect();
    Ok(TriggerPacket {
        packet_id: packet_id(trigger.t_a, trigger.ego_id),
        camera_id: camera_id.to_string(),
        t_a: trigger.t_a,
        ego_id: trigger.ego_id,
        ego_class: trigger.ego_class.clone(),
        member_ids: trigger.member_ids.clone(),
        window,
        crops,
        scores: trigger.scores,
        diagnostics: trigger.diagnostics,
        truncated,
        warnings: Vec::new(),
    })
}

#[derive(Debug, Clone)]
struct Pending {
    trigger: Trigger,
    start: u64,
    end: u64,
    recorded_through: u64,
    boxes: BTreeMap<u64, Vec<BBox>>,
}

impl Pending {
    fn record(&mut self, t: u64, tracker: &Tracker) {
        let boxes: Vec<BBox> = self
            .trigger
            .member_ids
            .iter()
            .filter_map(|id| {
                tracker
                    .get(*id)
                    .and_then(|tr| tr.observation_at(t))
                    .map(|o| o.bbox)
            })
            .collect();
        self.boxes.insert(t, boxes);
        self.recorded_through = t;
    }
}

/// Refractory bookkeeping and deferred packet assembly for one camera.
#[derive(Debug, Clone)]
pub struct Localizer {
    config: LocConfig,
    camera_id: String,
    frame_dims: (u32, u32),
    last_trigger: HashMap<u64, u64>,
    pending: Vec<Pending>,
}

impl Localizer {
    pub fn new(config: LocConfig, camera_id: &str, frame_dims: (u32, u32)) -> Self {
        Self {
            config,
            camera_id: camera_id.to_string(),
            frame_dims,
            last_trigger: HashMap::new(),
            pending: Vec::new(),
        }
    }

    pub fn config(&self) -> &LocConfig {
        &self.config
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    /// Applies the trigger rule and, when it fires, records the trigger
    /// frame for the refractory period.
    pub fn check(&mut self, ego_id: u64, score: &SurpriseScore, t: u64) -> bool {
        let fire = should_trigger(
            score,
            self.last_trigger.get(&ego_id).copied(),
            self.config.tau_cool,
            t,
        );
        if fire {
            self.last_trigger.insert(ego_id, t);
        }
        fire
    }

    /// Opens a packet; member boxes from the window's past edge up to `t_a`
    /// are taken from the tracker history.
    pub fn open(&mut self, trigger: Trigger, tracker: &Tracker) {
        let start = trigger.t_a.saturating_sub(self.config.tau_p);
        let end = trigger.t_a + self.config.tau_f;
        debug!(
            t_a = trigger.t_a,
            ego = trigger.ego_id,
            start,
            end,
            "packet opened"
        );
        let mut p = Pending {
            start,
            end,
            recorded_through: start,
            boxes: BTreeMap::new(),
            trigger,
        };
        for t in start..=p.trigger.t_a {
            p.record(t, tracker);
        }
        self.pending.push(p);
    }

    /// Records frame `t` for every open packet and returns the packets whose
    /// window closes at or before `t`, in trigger order.
    pub fn advance(
        &mut self,
        t: u64,
        tracker: &Tracker,
    ) -> Result<Vec<TriggerPacket>, LocalizationError> {
        for p in &mut self.pending {
            if t > p.recorded_through && t <= p.end {
                p.record(t, tracker);
            }
        }
        let (done, open): (Vec<Pending>, Vec<Pending>) = std::mem::take(&mut self.pending)
            .into_iter()
            .partition(|p| p.end <= t);
        self.pending = open;
        done.into_iter().map(|p| self.complete(p, false)).collect()
    }

    /// Emits every open packet with its window cut at the last seen frame.
    pub fn finish(&mut self) -> Result<Vec<TriggerPacket>, LocalizationError> {
        std::mem::take(&mut self.pending)
            .into_iter()
            .map(|p| self.complete(p, true))
            .collect()
    }

    fn complete(&self, p: Pending, truncated: bool) -> Result<TriggerPacket, LocalizationError> {
        let end = if truncated {
            p.recorded_through.max(p.trigger.t_a)
        } else {
            p.end
        };
        assemble_packet(
            &p.trigger,
            &self.camera_id,
            &p.boxes,
            [p.start, end],
            self.config.pad,
            self.frame_dims,
            truncated,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Detection;
    use crate::kinematics::TrackerConfig;
    use proptest::prelude::*;

    fn bb(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    fn score(s: f64) -> SurpriseScore {
        SurpriseScore {
            s_par: s,
            s_perp: 0.0,
            s_ego: s,
        }
    }

    #[test]
    fn trigger_rule() {
        assert!(!should_trigger(&score(0.0), None, 20, 10));
        assert!(should_trigger(&score(0.7), None, 20, 10));
        assert!(!should_trigger(&score(0.7), Some(7), 20, 10));
        assert!(should_trigger(&score(0.7), Some(10), 20, 30));
    }

    #[test]
    fn enclosing_examples() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(enclosing_box(&[a], 0.0, 100, 100).unwrap(), a);
        let b = bb(20.0, 5.0, 30.0, 15.0);
        assert_eq!(
            enclosing_box(&[a, b], 0.0, 100, 100).unwrap(),
            bb(0.0, 0.0, 30.0, 15.0)
        );
        assert_eq!(
            enclosing_box(&[a, b], 0.1, 100, 100).unwrap(),
            bb(0.0, 0.0, 33.0, 18.0)
        );
        assert_eq!(
            enclosing_box(&[a, b], 0.1, 31, 16).unwrap(),
            bb(0.0, 0.0, 31.0, 16.0)
        );
        assert!(enclosing_box(&[], 0.0, 10, 10).is_err());
    }

    #[test]
    fn padding_never_cuts_boxes_that_overhang_the_frame() {
        let a = bb(-5.0, 2.0, 12.0, 9.0);
        let e = enclosing_box(&[a], 0.5, 10, 10).unwrap();
        assert!(e.contains(&a));
    }

    fn diag() -> Diagnostics {
        Diagnostics {
            v_par_eff: 0.0,
            v_perp_eff: 0.0,
            var_perp: 0.0,
            posterior: Posterior {
                mu_post_par: 0.0,
                mu_post_perp: 0.0,
                sigma_post_par: 1.0,
                sigma_post_perp: 1.0,
                n_obs: 0,
            },
        }
    }

    fn trig(t_a: u64, members: Vec<u64>) -> Trigger {
        Trigger {
            t_a,
            ego_id: members[0],
            ego_class: "car".into(),
            member_ids: members,
            scores: score(1.0),
            diagnostics: diag(),
        }
    }

    #[test]
    fn single_frame_packet() {
        let mut boxes = BTreeMap::new();
        boxes.insert(5, vec![bb(10.0, 10.0, 20.0, 20.0)]);
        let p = assemble_packet(
            &trig(5, vec![1]),
            "cam",
            &boxes,
            [5, 5],
            0.1,
            (100, 100),
            false,
        )
        .unwrap();
        assert_eq!(p.crops.len(), 1);
        assert_eq!(p.crops[0].bbox, bb(9.0, 9.0, 21.0, 21.0));
        assert_eq!(p.packet_id, "t000005_e1");
    }

    #[test]
    fn gaps_reuse_nearest_box() {
        let mut boxes = BTreeMap::new();
        boxes.insert(0, vec![bb(0.0, 0.0, 1.0, 1.0)]);
        boxes.insert(1, vec![]);
        boxes.insert(2, vec![]);
        boxes.insert(3, vec![]);
        boxes.insert(4, vec![bb(5.0, 5.0, 6.0, 6.0)]);
        let p = assemble_packet(
            &trig(0, vec![1]),
            "cam",
            &boxes,
            [0, 5],
            0.0,
            (100, 100),
            false,
        )
        .unwrap();
        let got: Vec<f64> = p.crops.iter().map(|c| c.bbox.x_min).collect();
        assert_eq!(got, vec![0.0, 0.0, 0.0, 5.0, 5.0, 5.0]);
    }

    fn moving_tracker(frames: u64) -> Tracker {
        let mut tr = Tracker::new(TrackerConfig::default(), 200);
        for f in 0..frames {
            let x = f as f64 * 2.0;
            let dets = vec![
                Detection::new(f, Some(1), bb(x, 10.0, x + 8.0, 16.0), 0.9, "car"),
                Detection::new(f, Some(2), bb(x, 40.0, x + 8.0, 46.0), 0.9, "truck"),
            ];
            tr.associate(f, &dets).unwrap();
        }
        tr
    }

    #[test]
    fn deferred_emission_and_window_clamp() {
        let cfg = LocConfig {
            tau_p: 10,
            tau_f: 3,
            tau_cool: 50,
            pad: 0.0,
        };
        let mut loc = Localizer::new(cfg, "cam", (1000, 1000));
        let mut tr = Tracker::new(TrackerConfig::default(), 200);
        let mut out = Vec::new();
        for f in 0..10u64 {
            let x = f as f64 * 2.0;
            tr.associate(
                f,
                &[Detection::new(
                    f,
                    Some(1),
                    bb(x, 10.0, x + 8.0, 16.0),
                    0.9,
                    "car",
                )],
            )
            .unwrap();
            if f == 2 {
                assert!(loc.check(1, &score(1.0), f));
                loc.open(trig(2, vec![1]), &tr);
            }
            let done = loc.advance(f, &tr).unwrap();
            if f < 5 {
                assert!(done.is_empty(), "emitted before the window closed");
            }
            out.extend(done);
        }
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].window, [0, 5]);
        assert_eq!(out[0].crops.len(), 6);
        assert!(!loc.check(1, &score(1.0), 9));
    }

    #[test]
    fn containment_over_a_full_window() {
        let tr = moving_tracker(121);
        let cfg = LocConfig {
            tau_p: 10,
            tau_f: 10,
            tau_cool: 50,
            pad: 0.1,
        };
        let mut loc = Localizer::new(cfg, "cam", (1000, 1000));
        // open at 100 using history, then replay the future edge from history
        loc.open(trig(100, vec![1, 2]), &tr);
        let mut done = Vec::new();
        for f in 101..=110 {
            done.extend(loc.advance(f, &tr).unwrap());
        }
        let p = &done[0];
        assert_eq!(p.crops.len(), 21);
        for c in &p.crops {
            for id in &p.member_ids {
                let o = tr.get(*id).unwrap().observation_at(c.frame).unwrap();
                assert!(c.bbox.contains(&o.bbox));
            }
        }
    }

    #[test]
    fn truncated_packets_are_flushed() {
        let tr = moving_tracker(5);
        let mut loc = Localizer::new(LocConfig::default(), "cam", (1000, 1000));
        loc.open(trig(4, vec![1]), &tr);
        assert!(loc.advance(4, &tr).unwrap().is_empty());
        let out = loc.finish().unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].truncated);
        assert_eq!(out[0].window, [0, 4]);
    }

    #[test]
    fn manifest_round_trip_without_frames() {
        let tmp = tempfile::tempdir().unwrap();
        let mut boxes = BTreeMap::new();
        boxes.insert(3, vec![bb(1.0, 1.0, 4.0, 4.0)]);
        let mut p = assemble_packet(
            &trig(3, vec![7]),
            "cam",
            &boxes,
            [3, 3],
            0.0,
            (10, 10),
            false,
        )
        .unwrap();
        p.write(tmp.path(), None).unwrap();
        assert_eq!(p.warnings, vec![WARN_NO_FRAMES.to_string()]);
        assert_eq!(TriggerPacket::load(tmp.path()).unwrap(), p);
    }

    fn arb_boxes() -> impl Strategy<Value = Vec<BBox>> {
        proptest::collection::vec(
            (0.0f64..900.0, 0.0f64..900.0, 0.5f64..100.0, 0.5f64..100.0),
            1..12,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(x, y, w, h)| bb(x, y, x + w, y + h))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn enclosing_box_is_exact_at_zero_pad(boxes in arb_boxes()) {
            let e = enclosing_box(&boxes, 0.0, 1000, 1000).unwrap();
            for b in &boxes {
                prop_assert!(e.contains(b));
            }
            // every side is touched by some member
            prop_assert!(boxes.iter().any(|b| b.x_min == e.x_min));
            prop_assert!(boxes.iter().any(|b| b.y_min == e.y_min));
            prop_assert!(boxes.iter().any(|b| b.x_max == e.x_max));
            prop_assert!(boxes.iter().any(|b| b.y_max == e.y_max));
        }

        #[test]
        fn padded_box_contains_members_and_stays_in_frame(boxes in arb_boxes(), pad in 0.0f64..1.0) {
            let e = enclosing_box(&boxes, pad, 1000, 1000).unwrap();
            for b in &boxes {
                prop_assert!(e.contains(b));
            }
            prop_assert!(e.x_min >= 0.0 && e.y_min >= 0.0 && e.x_max <= 1000.0 && e.y_max <= 1000.0);
        }

        #[test]
        fn cooldown_bounds_packets(len in 1u64..400, cool in 1u64..100) {
            let mut loc = Localizer::new(LocConfig { tau_cool: cool, ..Default::default() }, "c", (10, 10));
            let fired = (0..len).filter(|t| loc.check(1, &score(1.0), *t)).count() as u64;
            prop_assert!(fired <= len.div_ceil(cool));
        }
    }
}
