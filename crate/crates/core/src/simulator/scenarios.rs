//! Seeded scenario families: nominal traffic, traffic with injected
//! anomalies, curved nominal roads, and a slow flow-speed shift.
//!
//! Anomalies are placed on vehicles that are on screen, have traffic around
//! them, and stay fully visible for the whole event window.

use super::{
    simulate, AnomalyEvent, AnomalyKind, FlowShift, LaneGeometry, ScenarioSpec, Simulation,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

const FRAME_W: u32 = 1920;
const FRAME_H: u32 = 1080;
/// Frames of history a target needs before its event starts.
const LEAD_IN: u64 = 30;

fn rng_for(seed: u64, family: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5ce_0000 + family);
    rng
}

/// Straight road through the frame centre, heading within ±30° of
/// horizontal in either direction.
fn straight(rng: &mut ChaCha8Rng) -> LaneGeometry {
    let angle = rng.random_range(-30.0..30.0) + if rng.random_bool(0.5) { 180.0 } else { 0.0 };
    LaneGeometry::Straight { angle_deg: angle }
}

/// Gentle curve through the frame centre whose heading there is 20–40° off
/// horizontal, so image axes and flow axes disagree.
fn arc(rng: &mut ChaCha8Rng) -> LaneGeometry {
    let radius: f64 = rng.random_range(6000.0..9000.0);
    let tilt: f64 = rng.random_range(20.0f64..40.0).to_radians()
        * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let heading = tilt + if rng.random_bool(0.5) { PI } else { 0.0 };
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let theta_p = heading - sign * PI / 2.0;
    let p0 = [FRAME_W as f64 / 2.0, FRAME_H as f64 / 2.0];
    let center = [
        p0[0] - radius * theta_p.cos(),
        p0[1] - radius * theta_p.sin(),
    ];
    let half_len = (FRAME_W as f64).hypot(FRAME_H as f64) / 2.0 + 200.0;
    let half_span = half_len / radius;
    LaneGeometry::Arc {
        center,
        radius,
        start_deg: (theta_p - sign * half_span).to_degrees(),
        span_deg: (sign * 2.0 * half_span).to_degrees(),
    }
}

fn traffic(
    rng: &mut ChaCha8Rng,
    seed: u64,
    geometry: LaneGeometry,
    vehicles: u32,
    duration: u64,
) -> ScenarioSpec {
    let lanes = rng.random_range(2..=4);
    let speed: f64 = rng.random_range(6.0..10.0);
    // frames to cross the frame diagonal
    let crossing = (FRAME_W as f64).hypot(FRAME_H as f64) / speed;
    let warm = (crossing / 2.0) as u64;
    let spawn_window = duration as f64 + warm as f64 - 0.3 * crossing;
    ScenarioSpec {
        lanes,
        lane_width: 36.0,
        geometry,
        vehicles,
        nominal_speed: speed,
        speed_jitter: 0.1,
        spawn_rate: vehicles as f64 / spawn_window,
        duration,
        frame_w: FRAME_W,
        frame_h: FRAME_H,
        seed,
        anomalies: vec![],
        flow_shift: None,
        warm_start: warm,
        position_noise: 0.0,
        vehicle_scale: 1.0,
    }
}

fn draw_event(rng: &mut ChaCha8Rng, kind: AnomalyKind, speed: f64) -> (u64, f64) {
    match kind {
        AnomalyKind::SuddenStop => (rng.random_range(40..=60), rng.random_range(1.5..3.0)),
        AnomalyKind::AbnormalStop => (rng.random_range(50..=70), rng.random_range(0.4..0.8)),
        AnomalyKind::Speeding => (
            rng.random_range(30..=50),
            speed * rng.random_range(0.5..0.8),
        ),
        AnomalyKind::LateralSwerve => (rng.random_range(24..=40), rng.random_range(2.0..3.5)),
        AnomalyKind::WrongWay => (rng.random_range(40..=60), 0.0),
    }
}

/// Earliest frames the target must already be visible before onset and
/// latest it must still be visible after the window, in nominal traffic.
fn visibility_needs(kind: AnomalyKind, duration: u64, magnitude: f64, speed: f64) -> (u64, u64) {
    match kind {
        AnomalyKind::Speeding => (
            LEAD_IN,
            (magnitude * duration as f64 / speed).ceil() as u64 + 5,
        ),
        AnomalyKind::WrongWay => {
            let turn = (duration / 4).clamp(3, 12).min(duration / 2);
            (LEAD_IN + 2 * (duration - 2 * turn) + 10, 0)
        }
        _ => (LEAD_IN, 0),
    }
}

fn has_company(sim: &Simulation, target: u64, t: u64) -> bool {
    let radius = 0.25 * (FRAME_W as f64).hypot(FRAME_H as f64);
    let Some(me) = sim.vehicle(target).and_then(|v| v.box_at(t)) else {
        return false;
    };
    sim.vehicles
        .iter()
        .filter(|v| v.id != target)
        .filter_map(|v| v.box_at(t))
        .filter(|b| (b.center() - me.center()).norm() <= radius)
        .count()
        >= 1
}

/// Adds `count` anomalies to `spec`, each on a distinct vehicle.
fn inject(rng: &mut ChaCha8Rng, spec: &mut ScenarioSpec, count: usize) {
    let nominal = simulate(spec).expect("generated spec is valid");
    let mut attempts = 0;
    while spec.anomalies.len() < count && attempts < 400 {
        attempts += 1;
        let kind = AnomalyKind::ALL[rng.random_range(0..AnomalyKind::ALL.len())];
        let target = rng.random_range(0..spec.vehicles);
        if spec.anomalies.iter().any(|e| e.vehicle == target) {
            continue;
        }
        let Some(v) = nominal.vehicle(target as u64) else {
            continue;
        };
        let Some((first, last)) = v.visible_span() else {
            continue;
        };
        let (duration, magnitude) = draw_event(rng, kind, v.base_speed);
        let (before, after) = visibility_needs(kind, duration, magnitude, v.base_speed);
        let lo = first + before;
        let hi = last
            .saturating_sub(duration + after)
            .min(spec.duration.saturating_sub(duration));
        if lo >= hi {
            continue;
        }
        let onset = rng.random_range(lo..hi);
        if !has_company(&nominal, target as u64, onset) {
            continue;
        }
        let event = AnomalyEvent {
            kind,
            vehicle: target,
            onset,
            duration,
            magnitude,
        };
        let mut trial = spec.clone();
        trial.anomalies.push(event);
        let Ok(sim) = simulate(&trial) else { continue };
        let tv = sim.vehicle(target as u64).expect("target exists");
        if (onset..onset + duration).all(|t| tv.box_at(t).is_some()) {
            spec.anomalies.push(event);
        }
    }
}

/// Straight or curved road, 10–30 vehicles, 1–3 anomalies.
pub fn recall_scenario(seed: u64) -> ScenarioSpec {
    let mut rng = rng_for(seed, 1);
    let geometry = if seed.is_multiple_of(2) {
        straight(&mut rng)
    } else {
        arc(&mut rng)
    };
    let vehicles = rng.random_range(10..=30);
    let mut spec = traffic(&mut rng, seed, geometry, vehicles, 300);
    let count = rng.random_range(1..=3);
    inject(&mut rng, &mut spec, count);
    spec
}

/// Same traffic families with no anomalies.
pub fn nominal_scenario(seed: u64) -> ScenarioSpec {
    let mut rng = rng_for(seed, 2);
    let geometry = if seed.is_multiple_of(2) {
        straight(&mut rng)
    } else {
        arc(&mut rng)
    };
    let vehicles = rng.random_range(10..=30);
    traffic(&mut rng, seed, geometry, vehicles, 300)
}

/// Curved road, no anomalies.
pub fn arc_nominal_scenario(seed: u64) -> ScenarioSpec {
    let mut rng = rng_for(seed, 3);
    let geometry = arc(&mut rng);
    let vehicles = rng.random_range(15..=30);
    traffic(&mut rng, seed, geometry, vehicles, 300)
}

/// Traffic that slows to 40–55% of nominal over 80–120 frames, as at the
/// onset of congestion, with 1–2 anomalies.
pub fn flow_shift_scenario(seed: u64) -> ScenarioSpec {
    let mut rng = rng_for(seed, 4);
    let geometry = straight(&mut rng);
    let vehicles = rng.random_range(20..=30);
    let mut spec = traffic(&mut rng, seed, geometry, vehicles, 400);
    spec.flow_shift = Some(FlowShift {
        onset: rng.random_range(120..=160),
        ramp: rng.random_range(80..=120),
        factor: rng.random_range(0.4..0.55),
    });
    let count = rng.random_range(1..=2);
    inject(&mut rng, &mut spec, count);
    spec
}
