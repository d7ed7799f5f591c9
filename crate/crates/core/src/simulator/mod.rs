//! Synthetic expressway scenes with exact ground truth.
//!
//! Vehicles move along lanes in a lane-aligned frame `(s, d)`: `s` is the
//! arc length along the lane centre line and `d` the signed offset along the
//! lane normal. Each frame a vehicle's velocity `(u, w)` comes from its
//! nominal speed or, inside an anomaly window, from the anomaly's closed-form
//! law; the displacement observed at frame `t` equals the velocity at `t`.
//! Boxes shrink linearly along the lane to mimic far-field perspective and
//! are emitted only while fully inside the frame.

mod render;
pub mod scenarios;

pub use render::{paint, render_frames, SimFrames, BACKGROUND, ROAD};

use crate::geom::{BBox, Vec2};
use crate::ingest::{Detection, DetectionBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Parameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LaneGeometry {
    /// Parallel lanes through the frame centre; `angle_deg` is the direction
    /// of travel measured from +x toward +y.
    Straight { angle_deg: f64 },
    /// Concentric lanes. `radius` is the road centre line; travel runs from
    /// `start_deg` through `span_deg` (negative spans run clockwise).
    Arc {
        center: [f64; 2],
        radius: f64,
        start_deg: f64,
        span_deg: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    SuddenStop,
    LateralSwerve,
    Speeding,
    WrongWay,
    AbnormalStop,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 5] = [
        Self::SuddenStop,
        Self::LateralSwerve,
        Self::Speeding,
        Self::WrongWay,
        Self::AbnormalStop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SuddenStop => "sudden_stop",
            Self::LateralSwerve => "lateral_swerve",
            Self::Speeding => "speeding",
            Self::WrongWay => "wrong_way",
            Self::AbnormalStop => "abnormal_stop",
        }
    }
}

/// Kinematic override of one vehicle on `[onset, onset + duration)`.
///
/// `magnitude` is a deceleration (px/frame^2) for the stop kinds, the peak
/// lateral speed for swerves and the speed excess for speeding (px/frame).
/// Wrong-way events ignore it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyEvent {
    pub kind: AnomalyKind,
    pub vehicle: u32,
    pub onset: u64,
    pub duration: u64,
    #[serde(default)]
    pub magnitude: f64,
}

/// Gradual change of every vehicle's nominal speed by `factor`, linear over
/// `ramp` frames from `onset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowShift {
    pub onset: u64,
    pub ramp: u64,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub lanes: u32,
    #[serde(default = "defaults::lane_width")]
    pub lane_width: f64,
    pub geometry: LaneGeometry,
    pub vehicles: u32,
    /// px/frame.
    pub nominal_speed: f64,
    /// Standard deviation of the per-vehicle speed offset, px/frame.
    #[serde(default)]
    pub speed_jitter: f64,
    /// Vehicles per frame.
    pub spawn_rate: f64,
    pub duration: u64,
    #[serde(default = "defaults::frame_w")]
    pub frame_w: u32,
    #[serde(default = "defaults::frame_h")]
    pub frame_h: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub anomalies: Vec<AnomalyEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_shift: Option<FlowShift>,
    /// Frames simulated before frame 0 so the road starts populated.
    #[serde(default)]
    pub warm_start: u64,
    /// Standard deviation of per-detection box-centre noise, px.
    #[serde(default)]
    pub position_noise: f64,
    /// Multiplier on the near-edge vehicle sizes.
    #[serde(default = "defaults::one")]
    pub vehicle_scale: f64,
}

mod defaults {
    pub fn lane_width() -> f64 {
        36.0
    }
    pub fn frame_w() -> u32 {
        1920
    }
    pub fn frame_h() -> u32 {
        1080
    }
    pub fn one() -> f64 {
        1.0
    }
}

/// Box scale at the near and far edge of the visible lane.
pub const NEAR_SCALE: f64 = 1.0;
pub const FAR_SCALE: f64 = 0.15;
/// Distance before the visible lane section where vehicles appear.
const ENTRY_MARGIN: f64 = 80.0;

pub const CLASSES: [(&str, f64, f64, f64); 3] = [
    ("car", 44.0, 26.0, 0.7),
    ("truck", 70.0, 34.0, 0.2),
    ("bus", 80.0, 34.0, 0.1),
];

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Parameter(m));
        if self.lanes == 0 {
            return bad("lanes must be >= 1".into());
        }
        if !(self.lane_width > 0.0) {
            return bad("lane_width must be > 0".into());
        }
        if !(self.nominal_speed > 0.0 && self.nominal_speed.is_finite()) {
            return bad(format!(
                "nominal_speed = {} must be > 0",
                self.nominal_speed
            ));
        }
        if !(self.speed_jitter >= 0.0) || !(self.position_noise >= 0.0) {
            return bad("jitter and noise must be >= 0".into());
        }
        if self.vehicles > 0 && !(self.spawn_rate > 0.0) {
            return bad("spawn_rate must be > 0".into());
        }
        if self.frame_w == 0 || self.frame_h == 0 || self.duration == 0 {
            return bad("frame size and duration must be positive".into());
        }
        if !(self.vehicle_scale > 0.0) {
            return bad("vehicle_scale must be > 0".into());
        }
        if let LaneGeometry::Arc {
            radius, span_deg, ..
        } = self.geometry
        {
            let half_road = self.lanes as f64 * self.lane_width / 2.0;
            if !(radius > half_road) || span_deg == 0.0 {
                return bad(
                    "arc radius must exceed half the road width and span must be non-zero".into(),
                );
            }
        }
        for e in &self.anomalies {
            if e.vehicle >= self.vehicles {
                return bad(format!(
                    "anomaly targets vehicle {} of {}",
                    e.vehicle, self.vehicles
                ));
            }
            if e.duration < 2 || e.onset + e.duration > self.duration {
                return bad(format!(
                    "anomaly window [{}, {}) outside [0, {})",
                    e.onset,
                    e.onset + e.duration,
                    self.duration
                ));
            }
            if e.kind != AnomalyKind::WrongWay && !(e.magnitude > 0.0) {
                return bad(format!("{} needs a positive magnitude", e.kind.as_str()));
            }
        }
        let mut targets: Vec<u32> = self.anomalies.iter().map(|e| e.vehicle).collect();
        targets.sort_unstable();
        if targets.windows(2).any(|w| w[0] == w[1]) {
            return bad("at most one anomaly per vehicle".into());
        }
        if let Some(f) = self.flow_shift {
            if !(f.factor > 0.0) {
                return bad("flow_shift.factor must be > 0".into());
            }
        }
        Ok(())
    }

    fn shift_factor(&self, t: i64) -> f64 {
        match self.flow_shift {
            Some(f) if t >= f.onset as i64 => {
                let x = if f.ramp == 0 {
                    1.0
                } else {
                    ((t - f.onset as i64) as f64 / f.ramp as f64).min(1.0)
                };
                1.0 + (f.factor - 1.0) * x
            }
            _ => 1.0,
        }
    }
}

/// One lane's centre line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lane {
    Straight {
        origin: Vec2,
        dir: Vec2,
        length: f64,
    },
    Arc {
        center: Vec2,
        radius: f64,
        theta0: f64,
        sign: f64,
        length: f64,
    },
}

impl Lane {
    pub fn position(&self, s: f64, d: f64) -> Vec2 {
        match *self {
            Lane::Straight { origin, dir, .. } => origin + dir * s + dir.rot90() * d,
            Lane::Arc {
                center,
                radius,
                theta0,
                sign,
                ..
            } => {
                let th = theta0 + sign * s / radius;
                center + Vec2::new(th.cos(), th.sin()) * (radius - sign * d)
            }
        }
    }

    pub fn tangent(&self, s: f64) -> Vec2 {
        match *self {
            Lane::Straight { dir, .. } => dir,
            Lane::Arc {
                radius,
                theta0,
                sign,
                ..
            } => {
                let th = theta0 + sign * s / radius;
                Vec2::new(-th.sin(), th.cos()) * sign
            }
        }
    }

    pub fn length(&self) -> f64 {
        match *self {
            Lane::Straight { length, .. } | Lane::Arc { length, .. } => length,
        }
    }
}

/// Lane centre lines plus, for each, the sub-range of `s` inside the frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Road {
    pub lanes: Vec<Lane>,
    pub visible: Vec<(f64, f64)>,
    pub lane_width: f64,
    pub geometry: LaneGeometry,
    pub frame_w: u32,
    pub frame_h: u32,
}

impl Road {
    pub fn build(spec: &ScenarioSpec) -> Result<Self, SimError> {
        let (w, h) = (spec.frame_w as f64, spec.frame_h as f64);
        let offset = |k: u32| (k as f64 - (spec.lanes as f64 - 1.0) / 2.0) * spec.lane_width;
        let lanes: Vec<Lane> = (0..spec.lanes)
            .map(|k| match spec.geometry {
                LaneGeometry::Straight { angle_deg } => {
                    let dir = Vec2::new(1.0, 0.0).rotate(angle_deg.to_radians());
                    let half = w.hypot(h) / 2.0 + 2.0 * ENTRY_MARGIN;
                    let origin = Vec2::new(w / 2.0, h / 2.0) + dir.rot90() * offset(k) - dir * half;
                    Lane::Straight {
                        origin,
                        dir,
                        length: 2.0 * half,
                    }
                }
                LaneGeometry::Arc {
                    center,
                    radius,
                    start_deg,
                    span_deg,
                } => {
                    let sign = span_deg.signum();
                    let r = radius - sign * offset(k);
                    Lane::Arc {
                        center: Vec2::new(center[0], center[1]),
                        radius: r,
                        theta0: start_deg.to_radians(),
                        sign,
                        length: r * span_deg.to_radians().abs(),
                    }
                }
            })
            .collect();
        let mut visible = Vec::with_capacity(lanes.len());
        for (k, lane) in lanes.iter().enumerate() {
            let inside = |s: f64| {
                let p = lane.position(s, 0.0);
                p.x >= 0.0 && p.x <= w && p.y >= 0.0 && p.y <= h
            };
            let n = lane.length().ceil() as usize;
            let first = (0..=n).map(|i| i as f64).find(|s| inside(*s));
            let last = (0..=n).rev().map(|i| i as f64).find(|s| inside(*s));
            match (first, last) {
                (Some(a), Some(b)) if b - a > 100.0 => visible.push((a, b)),
                _ => {
                    return Err(SimError::Parameter(format!(
                        "lane {k} does not cross the frame"
                    )))
                }
            }
        }
        Ok(Self {
            lanes,
            visible,
            lane_width: spec.lane_width,
            geometry: spec.geometry,
            frame_w: spec.frame_w,
            frame_h: spec.frame_h,
        })
    }

    /// Linear far-field scale along the visible part of `lane`.
    pub fn scale(&self, lane: usize, s: f64) -> f64 {
        let (a, b) = self.visible[lane];
        let x = ((s - a) / (b - a)).clamp(0.0, 1.0);
        NEAR_SCALE + (FAR_SCALE - NEAR_SCALE) * x
    }
}

/// Kinematic state at one frame, lane-aligned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneState {
    pub s: f64,
    pub d: f64,
    pub u: f64,
    pub w: f64,
    /// Nominal speed at this frame (flow shift applied).
    pub nominal: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleTrace {
    pub id: u64,
    pub class: &'static str,
    pub lane: usize,
    pub base_speed: f64,
    /// Frame of `states[0]`; negative during the warm start.
    pub spawn: i64,
    pub states: Vec<LaneState>,
    /// Emitted boxes by frame.
    pub boxes: Vec<(u64, BBox)>,
}

impl VehicleTrace {
    pub fn state_at(&self, t: u64) -> Option<&LaneState> {
        let i = t as i64 - self.spawn;
        (i >= 0).then(|| self.states.get(i as usize)).flatten()
    }

    pub fn box_at(&self, t: u64) -> Option<BBox> {
        self.boxes
            .binary_search_by_key(&t, |(f, _)| *f)
            .ok()
            .map(|i| self.boxes[i].1)
    }

    /// First and last frame with an emitted box.
    pub fn visible_span(&self) -> Option<(u64, u64)> {
        Some((self.boxes.first()?.0, self.boxes.last()?.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtEvent {
    pub onset: u64,
    /// Exclusive.
    pub end: u64,
    pub kind: AnomalyKind,
    pub vehicle: u64,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub duration: u64,
    pub events: Vec<GtEvent>,
}

impl GroundTruth {
    pub fn is_flagged(&self, vehicle: u64, frame: u64) -> bool {
        self.events
            .iter()
            .any(|e| e.vehicle == vehicle && (e.onset..e.end).contains(&frame))
    }

    /// Per-frame label: some event is active.
    pub fn frame_labels(&self) -> Vec<bool> {
        let mut out = vec![false; self.duration as usize];
        for e in &self.events {
            for t in e.onset..e.end.min(self.duration) {
                out[t as usize] = true;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub spec: ScenarioSpec,
    pub road: Road,
    pub vehicles: Vec<VehicleTrace>,
    pub ground_truth: GroundTruth,
    frames: Vec<Vec<Detection>>,
}

/// Velocity `(u, w)` of an anomalous vehicle at step `k` of the window.
pub fn anomaly_velocity(
    kind: AnomalyKind,
    magnitude: f64,
    duration: u64,
    k: u64,
    nominal: f64,
) -> (f64, f64) {
    let (m, d, kf) = (magnitude, duration as f64, k as f64);
    match kind {
        // brake at `m`, hold, and re-accelerate at `m` to be back at speed
        // on the last frame of the window
        AnomalyKind::SuddenStop | AnomalyKind::AbnormalStop => {
            let u = (nominal - m * (kf + 1.0))
                .max(nominal - m * (d - 1.0 - kf))
                .clamp(0.0, nominal);
            (u, 0.0)
        }
        AnomalyKind::LateralSwerve => (nominal, m * (2.0 * PI * (kf + 0.5) / d).sin()),
        AnomalyKind::Speeding => (nominal + m, 0.0),
        // half-turn, drive against the flow, half-turn back
        AnomalyKind::WrongWay => {
            let turn = (d / 4.0).floor().clamp(3.0, 12.0).min((d / 2.0).floor());
            let phi = if kf < turn {
                PI * kf / turn
            } else if kf >= d - turn {
                PI + PI * (kf - (d - turn) + 1.0) / turn
            } else {
                PI
            };
            (nominal * phi.cos(), nominal * phi.sin())
        }
    }
}

fn pick_class(rng: &mut ChaCha8Rng) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (i, c) in CLASSES.iter().enumerate() {
        acc += c.3;
        if x < acc {
            return i;
        }
    }
    CLASSES.len() - 1
}

pub fn simulate(spec: &ScenarioSpec) -> Result<Simulation, SimError> {
    spec.validate()?;
    let road = Road::build(spec)?;
    let (fw, fh) = (spec.frame_w as f64, spec.frame_h as f64);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let end = spec.duration as i64;

    let mut vehicles = Vec::with_capacity(spec.vehicles as usize);
    let mut frames: Vec<Vec<Detection>> = vec![Vec::new(); spec.duration as usize];
    for i in 0..spec.vehicles {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64 + 1);
        let base_speed = (spec.nominal_speed + spec.speed_jitter * unit.sample(&mut rng))
            .max(0.1 * spec.nominal_speed);
        let class_idx = pick_class(&mut rng);
        let (class, cw, ch, _) = CLASSES[class_idx];
        let lane = (i % spec.lanes) as usize;
        let spawn = (i as f64 / spec.spawn_rate).floor() as i64 - spec.warm_start as i64;
        if spawn >= end {
            continue;
        }
        let event = spec.anomalies.iter().find(|e| e.vehicle == i).copied();
        let (vis_a, vis_b) = road.visible[lane];
        let l = road.lanes[lane];

        let mut states = Vec::new();
        let mut boxes = Vec::new();
        let mut st = LaneState {
            s: vis_a - ENTRY_MARGIN,
            d: 0.0,
            u: base_speed,
            w: 0.0,
            nominal: base_speed,
        };
        for t in spawn..end {
            let nominal = base_speed * spec.shift_factor(t);
            if t > spawn {
                let (u, w) = match event {
                    Some(e) if t >= e.onset as i64 && t < (e.onset + e.duration) as i64 => {
                        anomaly_velocity(
                            e.kind,
                            e.magnitude,
                            e.duration,
                            (t - e.onset as i64) as u64,
                            nominal,
                        )
                    }
                    _ => (nominal, 0.0),
                };
                st = LaneState {
                    s: st.s + u,
                    d: st.d + w,
                    u,
                    w,
                    nominal,
                };
            }
            states.push(st);
            if st.s > vis_b + ENTRY_MARGIN || st.s < vis_a - 4.0 * ENTRY_MARGIN {
                break;
            }
            let scale = road.scale(lane, st.s) * spec.vehicle_scale;
            let mut c = l.position(st.s, st.d);
            if spec.position_noise > 0.0 {
                c = c + Vec2::new(unit.sample(&mut rng), unit.sample(&mut rng))
                    * spec.position_noise;
            }
            if t < 0 {
                continue;
            }
            let Ok(b) = BBox::from_center(c.x, c.y, cw * scale, ch * scale) else {
                continue;
            };
            if b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= fw && b.y_max <= fh {
                let conf = (0.55 + 0.4 * scale).min(0.99);
                frames[t as usize].push(Detection::new(t as u64, Some(i as u64), b, conf, class));
                boxes.push((t as u64, b));
            }
        }
        vehicles.push(VehicleTrace {
            id: i as u64,
            class,
            lane,
            base_speed,
            spawn,
            states,
            boxes,
        });
    }

    let events = spec
        .anomalies
        .iter()
        .map(|e| GtEvent {
            onset: e.onset,
            end: e.onset + e.duration,
            kind: e.kind,
            vehicle: e.vehicle as u64,
            class: vehicles
                .iter()
                .find(|v| v.id == e.vehicle as u64)
                .map(|v| v.class)
                .unwrap_or("car")
                .to_string(),
        })
        .collect();
    Ok(Simulation {
        spec: spec.clone(),
        road,
        vehicles,
        ground_truth: GroundTruth {
            duration: spec.duration,
            events,
        },
        frames,
    })
}

impl Simulation {
    pub fn frames(&self) -> &[Vec<Detection>] {
        &self.frames
    }

    pub fn detections_at(&self, t: u64) -> &[Detection] {
        self.frames
            .get(t as usize)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    /// Non-empty frames as ingest batches.
    pub fn batches(&self) -> Vec<DetectionBatch> {
        self.frames
            .iter()
            .enumerate()
            .filter(|(_, d)| !d.is_empty())
            .map(|(t, d)| DetectionBatch {
                frame_index: t as u64,
                detections: d.clone(),
            })
            .collect()
    }

    pub fn vehicle(&self, id: u64) -> Option<&VehicleTrace> {
        self.vehicles.iter().find(|v| v.id == id)
    }

    pub fn write_jsonl<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        crate::ingest::write_detections_jsonl(out, self.frames.iter().flatten())
    }

    /// Largest deviation of the target's true lane-frame velocity from
    /// undisturbed flow `(nominal, 0)` inside the event window.
    pub fn peak_deviation(&self, event: &GtEvent) -> f64 {
        let Some(v) = self.vehicle(event.vehicle) else {
            return 0.0;
        };
        (event.onset..event.end)
            .filter_map(|t| v.state_at(t))
            .map(|s| (s.u - s.nominal).abs().max(s.w.abs()))
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_vehicle(speed: f64, anomalies: Vec<AnomalyEvent>) -> ScenarioSpec {
        ScenarioSpec {
            lanes: 1,
            lane_width: 36.0,
            geometry: LaneGeometry::Straight { angle_deg: 0.0 },
            vehicles: 1,
            nominal_speed: speed,
            speed_jitter: 0.0,
            spawn_rate: 1.0,
            duration: 120,
            frame_w: 1920,
            frame_h: 1080,
            seed: 1,
            anomalies,
            flow_shift: None,
            warm_start: 0,
            position_noise: 0.0,
            vehicle_scale: 1.0,
        }
    }

    #[test]
    fn constant_speed_along_the_lane() {
        let sim = simulate(&ScenarioSpec {
            duration: 10,
            ..one_vehicle(10.0, vec![])
        })
        .unwrap();
        let v = &sim.vehicles[0];
        for t in 1..10u64 {
            let (a, b) = (v.state_at(t - 1).unwrap(), v.state_at(t).unwrap());
            assert!((b.s - a.s - 10.0).abs() < 1e-12);
            let (pa, pb) = (
                sim.road.lanes[0].position(a.s, a.d),
                sim.road.lanes[0].position(b.s, b.d),
            );
            assert!(((pb - pa).norm() - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sudden_stop_integrates_the_braking_law() {
        let e = AnomalyEvent {
            kind: AnomalyKind::SuddenStop,
            vehicle: 0,
            onset: 50,
            duration: 40,
            magnitude: 5.0,
        };
        let sim = simulate(&one_vehicle(10.0, vec![e])).unwrap();
        let v = &sim.vehicles[0];
        assert_eq!(v.state_at(50).unwrap().u, 5.0);
        assert_eq!(v.state_at(51).unwrap().u, 0.0);
        let s52 = v.state_at(52).unwrap().s;
        for t in 52..88 {
            assert_eq!(v.state_at(t).unwrap().s, s52);
        }
        // back to speed on the last flagged frame
        assert_eq!(v.state_at(89).unwrap().u, 10.0);
        assert_eq!(v.state_at(90).unwrap().u, 10.0);
    }

    #[test]
    fn anomaly_laws_are_confined_to_their_window() {
        for kind in AnomalyKind::ALL {
            let d = 40;
            let mut lateral = 0.0;
            for k in 0..d {
                let (_, w) = anomaly_velocity(kind, 2.0, d, k, 8.0);
                lateral += w;
            }
            assert!(
                lateral.abs() < 1e-9,
                "{kind:?} leaves a lateral offset {lateral}"
            );
            let (u_last, w_last) = anomaly_velocity(kind, 2.0, d, d - 1, 8.0);
            if kind != AnomalyKind::Speeding && kind != AnomalyKind::LateralSwerve {
                assert!(
                    (u_last - 8.0).abs() < 1e-9 && w_last.abs() < 1e-9,
                    "{kind:?} ends at ({u_last}, {w_last})"
                );
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = scenarios::recall_scenario(3);
        let mut a = Vec::new();
        let mut b = Vec::new();
        simulate(&spec).unwrap().write_jsonl(&mut a).unwrap();
        simulate(&spec).unwrap().write_jsonl(&mut b).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b);
    }

    #[test]
    fn ground_truth_flags_exact_window() {
        let e = AnomalyEvent {
            kind: AnomalyKind::Speeding,
            vehicle: 0,
            onset: 20,
            duration: 10,
            magnitude: 3.0,
        };
        let sim = simulate(&one_vehicle(8.0, vec![e])).unwrap();
        let gt = &sim.ground_truth;
        let flagged: Vec<u64> = (0..120).filter(|t| gt.is_flagged(0, *t)).collect();
        assert_eq!(flagged, (20..30).collect::<Vec<_>>());
        assert_eq!(gt.frame_labels().iter().filter(|x| **x).count(), 10);
    }

    #[test]
    fn rejects_invalid_specs() {
        let e = AnomalyEvent {
            kind: AnomalyKind::Speeding,
            vehicle: 3,
            onset: 0,
            duration: 10,
            magnitude: 1.0,
        };
        assert!(simulate(&one_vehicle(8.0, vec![e])).is_err());
        let e = AnomalyEvent {
            kind: AnomalyKind::Speeding,
            vehicle: 0,
            onset: 115,
            duration: 10,
            magnitude: 1.0,
        };
        assert!(simulate(&one_vehicle(8.0, vec![e])).is_err());
        assert!(simulate(&ScenarioSpec {
            nominal_speed: 0.0,
            ..one_vehicle(8.0, vec![])
        })
        .is_err());
    }

    #[test]
    fn arc_lanes_keep_speed_and_curvature() {
        let spec = ScenarioSpec {
            geometry: LaneGeometry::Arc {
                center: [960.0, -5000.0],
                radius: 5600.0,
                start_deg: 100.0,
                span_deg: -20.0,
            },
            duration: 60,
            ..one_vehicle(9.0, vec![])
        };
        let sim = simulate(&spec).unwrap();
        let lane = sim.road.lanes[0];
        let v = &sim.vehicles[0];
        for t in 1..60 {
            let (a, b) = (v.state_at(t - 1).unwrap(), v.state_at(t).unwrap());
            let step = (lane.position(b.s, 0.0) - lane.position(a.s, 0.0)).norm();
            assert!((step - 9.0).abs() < 1e-3);
        }
        assert!(!v.boxes.is_empty());
    }

    #[test]
    fn scenario_suites_inject_detectable_events() {
        for seed in 0..20 {
            let spec = scenarios::recall_scenario(seed);
            let sim = simulate(&spec).unwrap();
            assert!(!sim.ground_truth.events.is_empty());
            for e in &sim.ground_truth.events {
                let jitter = spec.speed_jitter.max(1e-3);
                assert!(
                    sim.peak_deviation(e) >= 3.0 * jitter,
                    "seed {seed}: {e:?} not detectable"
                );
                let v = sim.vehicle(e.vehicle).unwrap();
                for t in e.onset..e.end {
                    assert!(
                        v.box_at(t).is_some(),
                        "seed {seed}: vehicle {} hidden at {t}",
                        e.vehicle
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn box_area_shrinks_along_the_lane(angle in -40.0f64..40.0, speed in 3.0f64..12.0) {
            let spec = ScenarioSpec {
                geometry: LaneGeometry::Straight { angle_deg: angle },
                duration: 400,
                ..one_vehicle(speed, vec![])
            };
            let sim = simulate(&spec).unwrap();
            let v = &sim.vehicles[0];
            prop_assert!(v.boxes.len() > 10);
            for w in v.boxes.windows(2) {
                prop_assert!(w[1].1.area() <= w[0].1.area() + 1e-9);
            }
        }

        #[test]
        fn every_event_exceeds_jitter(kind_i in 0usize..5, mag in 1.0f64..4.0, dur in 20u64..60, jitter in 0.0f64..0.3) {
            let kind = AnomalyKind::ALL[kind_i];
            let e = AnomalyEvent { kind, vehicle: 0, onset: 30, duration: dur, magnitude: mag };
            let sim = simulate(&ScenarioSpec { speed_jitter: jitter, ..one_vehicle(8.0, vec![e]) }).unwrap();
            let ev = &sim.ground_truth.events[0];
            prop_assert!(sim.peak_deviation(ev) >= 3.0 * jitter);
        }
    }
}
