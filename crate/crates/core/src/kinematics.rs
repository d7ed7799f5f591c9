//! Track maintenance, per-frame velocity estimation and the historical
//! window aggregates consumed by the scorer.

use crate::geom::{BBox, Vec2};
use crate::ingest::Detection;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet, VecDeque};
use thiserror::Error;

/// Image-plane velocity in px/frame.
pub type VelocityVector = Vec2;

#[derive(Debug, Error, PartialEq)]
pub enum KinematicsError {
    #[error("duplicate track id {track_id} in batch for frame {frame}")]
    DuplicateTrackId { frame: u64, track_id: u64 },

    #[error("frame {frame} is not after the last processed frame {last}")]
    FrameOrder { frame: u64, last: u64 },

    #[error("detection for frame {found} in batch for frame {frame}")]
    MixedBatch { frame: u64, found: u64 },

    #[error("track {track_id}: no observation at frame {frame}")]
    NotObserved { track_id: u64, frame: u64 },

    #[error("track {track_id}: no prior observation within {delta_max} frames of {frame}")]
    NoPriorObservation {
        track_id: u64,
        frame: u64,
        delta_max: u64,
    },

    #[error("empty aggregation window")]
    EmptyWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame: u64,
    pub bbox: BBox,
}

impl Observation {
    pub fn center(&self) -> Vec2 {
        self.bbox.center()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub track_id: u64,
    pub class_label: String,
    /// Number of frames in which the track was observed.
    pub age: u64,
    pub first_frame: u64,
    /// Consecutive processed frames without an observation.
    pub misses: u64,
    observations: VecDeque<Observation>,
    velocities: VecDeque<(u64, VelocityVector)>,
    history_len: usize,
}

impl Track {
    pub fn new(
        track_id: u64,
        class_label: &str,
        frame: u64,
        bbox: BBox,
        history_len: usize,
    ) -> Self {
        let mut observations = VecDeque::with_capacity(history_len.min(64));
        observations.push_back(Observation { frame, bbox });
        Self {
            track_id,
            class_label: class_label.to_string(),
            age: 1,
            first_frame: frame,
            misses: 0,
            observations,
            velocities: VecDeque::new(),
            history_len: history_len.max(2),
        }
    }

    fn observe(&mut self, frame: u64, bbox: BBox) {
        self.observations.push_back(Observation { frame, bbox });
        if self.observations.len() > self.history_len {
            self.observations.pop_front();
        }
        self.age += 1;
        self.misses = 0;
    }

    fn push_velocity(&mut self, frame: u64, v: VelocityVector) {
        self.velocities.push_back((frame, v));
        if self.velocities.len() > self.history_len {
            self.velocities.pop_front();
        }
    }

    pub fn last(&self) -> &Observation {
        self.observations
            .back()
            .expect("a track always holds its spawning observation")
    }

    pub fn last_frame(&self) -> u64 {
        self.last().frame
    }

    pub fn observations(&self) -> impl DoubleEndedIterator<Item = &Observation> + '_ {
        self.observations.iter()
    }

    pub fn observation_at(&self, frame: u64) -> Option<&Observation> {
        self.observations.iter().rev().find(|o| o.frame == frame)
    }

    pub fn position_at(&self, frame: u64) -> Option<Vec2> {
        self.observation_at(frame).map(Observation::center)
    }

    pub fn velocity_history(&self) -> impl DoubleEndedIterator<Item = &(u64, VelocityVector)> + '_ {
        self.velocities.iter()
    }

    pub fn velocity_at(&self, frame: u64) -> Option<VelocityVector> {
        self.velocities
            .iter()
            .rev()
            .find(|(f, _)| *f == frame)
            .map(|(_, v)| *v)
    }
}

/// Velocity at `t` from the displacement since the most recent earlier
/// observation, provided that observation is at most `delta_max` frames old.
pub fn estimate_velocity(
    track: &Track,
    t: u64,
    delta_max: u64,
) -> Result<VelocityVector, KinematicsError> {
    let current = track
        .observation_at(t)
        .ok_or(KinematicsError::NotObserved {
            track_id: track.track_id,
            frame: t,
        })?;
    let prior = track
        .observations()
        .rev()
        .find(|o| o.frame < t)
        .filter(|o| t - o.frame <= delta_max)
        .ok_or(KinematicsError::NoPriorObservation {
            track_id: track.track_id,
            frame: t,
            delta_max,
        })?;
    let gap = (t - prior.frame) as f64;
    Ok((current.center() - prior.center()) * (1.0 / gap))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub iou_gate: f64,
    pub tau_lost: u64,
    pub delta_max: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            iou_gate: 0.3,
            tau_lost: 10,
            delta_max: 5,
        }
    }
}

/// Outcome of associating one frame's detections.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Association {
    /// Track ids observed in this frame, ascending.
    pub observed: Vec<u64>,
    pub spawned: Vec<u64>,
    pub retired: Vec<u64>,
}

/// Greedy IoU tracker. Detections that already carry a track id are
/// associated by identity.
#[derive(Debug, Clone)]
pub struct Tracker {
    config: TrackerConfig,
    history_len: usize,
    tracks: BTreeMap<u64, Track>,
    last_frame: Option<u64>,
    next_id: u64,
}

impl Tracker {
    pub fn new(config: TrackerConfig, history_len: usize) -> Self {
        Self {
            config,
            history_len,
            tracks: BTreeMap::new(),
            last_frame: None,
            next_id: 0,
        }
    }

    pub fn tracks(&self) -> &BTreeMap<u64, Track> {
        &self.tracks
    }

    pub fn get(&self, id: u64) -> Option<&Track> {
        self.tracks.get(&id)
    }

    pub fn last_frame(&self) -> Option<u64> {
        self.last_frame
    }

    pub fn associate(
        &mut self,
        frame: u64,
        detections: &[Detection],
    ) -> Result<Association, KinematicsError> {
        if let Some(last) = self.last_frame {
            if frame <= last {
                return Err(KinematicsError::FrameOrder { frame, last });
            }
        }
        let mut seen = HashSet::new();
        for d in detections {
            if d.frame_index != frame {
                return Err(KinematicsError::MixedBatch {
                    frame,
                    found: d.frame_index,
                });
            }
            if let Some(id) = d.track_id {
                if !seen.insert(id) {
                    return Err(KinematicsError::DuplicateTrackId {
                        frame,
                        track_id: id,
                    });
                }
            }
        }
        self.last_frame = Some(frame);

        let mut out = Association::default();
        let mut updated: HashSet<u64> = HashSet::new();
        let mut untracked: Vec<&Detection> = Vec::new();

        for d in detections {
            match d.track_id {
                Some(id) => {
                    self.next_id = self.next_id.max(id + 1);
                    self.apply(id, frame, d, &mut out);
                    updated.insert(id);
                }
                None => untracked.push(d),
            }
        }

        if !untracked.is_empty() {
            let mut pairs: Vec<(f64, u64, usize)> = Vec::new();
            for (id, track) in &self.tracks {
                if updated.contains(id) {
                    continue;
                }
                let last = track.last().bbox;
                for (j, d) in untracked.iter().enumerate() {
                    let iou = last.iou(&d.bbox);
                    if iou >= self.config.iou_gate && iou > 0.0 {
                        pairs.push((iou, *id, j));
                    }
                }
            }
            pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut det_taken = vec![false; untracked.len()];
            for (_, id, j) in pairs {
                if det_taken[j] || updated.contains(&id) {
                    continue;
                }
                det_taken[j] = true;
                updated.insert(id);
                self.apply(id, frame, untracked[j], &mut out);
            }
            for (j, d) in untracked.iter().enumerate() {
                if !det_taken[j] {
                    let id = self.next_id;
                    self.next_id += 1;
                    updated.insert(id);
                    self.apply(id, frame, d, &mut out);
                }
            }
        }

        let tau_lost = self.config.tau_lost;
        let mut retired = Vec::new();
        for (id, track) in self.tracks.iter_mut() {
            if !updated.contains(id) {
                track.misses = frame - track.last_frame();
                if track.misses > tau_lost {
                    retired.push(*id);
                }
            }
        }
        for id in &retired {
            self.tracks.remove(id);
        }
        out.retired = retired;
        out.observed = updated.into_iter().collect();
        out.observed.sort_unstable();
        out.spawned.sort_unstable();
        Ok(out)
    }

    fn apply(&mut self, id: u64, frame: u64, det: &Detection, out: &mut Association) {
        let delta_max = self.config.delta_max;
        let track = match self.tracks.get_mut(&id) {
            Some(t) => {
                t.observe(frame, det.bbox);
                t
            }
            None => {
                out.spawned.push(id);
                self.tracks.entry(id).or_insert_with(|| {
                    Track::new(id, &det.class_label, frame, det.bbox, self.history_len)
                })
            }
        };
        if let Ok(v) = estimate_velocity(track, frame, delta_max) {
            track.push_velocity(frame, v);
        }
    }
}

/// One flow-aligned velocity sample of the ego.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentSample {
    pub frame: u64,
    pub v_par: f64,
    pub v_perp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowAggregate {
    pub mean_v_par: f64,
    pub max_abs_v_perp: f64,
    pub var_v_perp: f64,
    pub window_len: usize,
}

/// Aggregates the samples of the last `tau_h` frames ending at `t`
/// (frames `t - tau_h + 1 ..= t`).
pub fn aggregate_window<'a, I>(
    samples: I,
    t: u64,
    tau_h: u64,
) -> Result<WindowAggregate, KinematicsError>
where
    I: IntoIterator<Item = &'a ComponentSample>,
{
    let start = (t + 1).saturating_sub(tau_h);
    let mut n = 0usize;
    let mut sum_par = 0.0;
    let mut max_abs = 0.0f64;
    let mut perps = Vec::new();
    for s in samples
        .into_iter()
        .filter(|s| s.frame >= start && s.frame <= t)
    {
        n += 1;
        sum_par += s.v_par;
        max_abs = max_abs.max(s.v_perp.abs());
        perps.push(s.v_perp);
    }
    if n == 0 {
        return Err(KinematicsError::EmptyWindow);
    }
    let mean_perp = perps.iter().sum::<f64>() / n as f64;
    let var_v_perp = perps.iter().map(|p| (p - mean_perp).powi(2)).sum::<f64>() / n as f64;
    Ok(WindowAggregate {
        mean_v_par: sum_par / n as f64,
        max_abs_v_perp: max_abs,
        var_v_perp,
        window_len: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bbox(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn at(center: (f64, f64)) -> BBox {
        BBox::from_center(center.0, center.1, 8.0, 6.0).unwrap()
    }

    fn track_with(points: &[(u64, (f64, f64))]) -> Track {
        let mut t = Track::new(1, "car", points[0].0, at(points[0].1), 64);
        for &(f, c) in &points[1..] {
            t.observe(f, at(c));
        }
        t
    }

    #[test]
    fn unit_gap_velocity() {
        let t = track_with(&[(4, (100.0, 50.0)), (5, (104.0, 47.0))]);
        let v = estimate_velocity(&t, 5, 5).unwrap();
        assert!((v.x - 4.0).abs() < 1e-12 && (v.y + 3.0).abs() < 1e-12);
    }

    #[test]
    fn missed_frame_divides_by_gap() {
        let t = track_with(&[(3, (0.0, 0.0)), (5, (10.0, 2.0))]);
        let v = estimate_velocity(&t, 5, 5).unwrap();
        assert!((v.x - 5.0).abs() < 1e-12 && (v.y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stationary_track_has_zero_velocity() {
        let t = track_with(&[(0, (7.0, 7.0)), (1, (7.0, 7.0))]);
        assert_eq!(estimate_velocity(&t, 1, 5).unwrap(), Vec2::ZERO);
    }

    #[test]
    fn stale_prior_observation_is_rejected() {
        let t = track_with(&[(0, (0.0, 0.0)), (9, (9.0, 0.0))]);
        assert!(matches!(
            estimate_velocity(&t, 9, 5),
            Err(KinematicsError::NoPriorObservation { .. })
        ));
        assert!(matches!(
            estimate_velocity(&t, 4, 5),
            Err(KinematicsError::NotObserved { .. })
        ));
    }

    #[test]
    fn explicit_ids_pass_through() {
        let mut tr = Tracker::new(TrackerConfig::default(), 32);
        let d0 = Detection::new(0, Some(42), bbox(0.0, 0.0, 10.0, 10.0), 0.9, "car");
        let d1 = Detection::new(1, Some(42), bbox(500.0, 0.0, 510.0, 10.0), 0.9, "car");
        tr.associate(0, &[d0]).unwrap();
        tr.associate(1, &[d1]).unwrap();
        let t = tr.get(42).unwrap();
        assert_eq!(t.age, 2);
        assert_eq!(t.position_at(1), Some(Vec2::new(505.0, 5.0)));
    }

    #[test]
    fn greedy_iou_match_above_gate() {
        let mut tr = Tracker::new(TrackerConfig::default(), 32);
        tr.associate(
            0,
            &[Detection::new(
                0,
                None,
                bbox(10.0, 10.0, 20.0, 20.0),
                0.9,
                "car",
            )],
        )
        .unwrap();
        let a = tr
            .associate(
                1,
                &[Detection::new(
                    1,
                    None,
                    bbox(11.0, 11.0, 21.0, 21.0),
                    0.9,
                    "car",
                )],
            )
            .unwrap();
        assert!(a.spawned.is_empty());
        assert_eq!(tr.tracks().len(), 1);
        let t = tr.tracks().values().next().unwrap();
        assert_eq!(t.velocity_at(1), Some(Vec2::new(1.0, 1.0)));
    }

    #[test]
    fn gate_rejection_spawns_and_counts_miss() {
        let mut tr = Tracker::new(TrackerConfig::default(), 32);
        tr.associate(
            0,
            &[Detection::new(
                0,
                None,
                bbox(0.0, 0.0, 10.0, 10.0),
                0.9,
                "car",
            )],
        )
        .unwrap();
        // IoU([0,0,10,10], [8,0,18,10]) = 20/180 ~ 0.11
        let a = tr
            .associate(
                1,
                &[Detection::new(
                    1,
                    None,
                    bbox(8.0, 0.0, 18.0, 10.0),
                    0.9,
                    "car",
                )],
            )
            .unwrap();
        assert_eq!(a.spawned.len(), 1);
        assert_eq!(tr.tracks().len(), 2);
        assert_eq!(tr.get(0).unwrap().misses, 1);
    }

    #[test]
    fn lost_tracks_retire_after_tau_lost() {
        let cfg = TrackerConfig {
            tau_lost: 2,
            ..Default::default()
        };
        let mut tr = Tracker::new(cfg, 32);
        tr.associate(
            0,
            &[Detection::new(
                0,
                Some(1),
                bbox(0.0, 0.0, 1.0, 1.0),
                1.0,
                "car",
            )],
        )
        .unwrap();
        for f in 1..=2 {
            assert!(tr.associate(f, &[]).unwrap().retired.is_empty());
        }
        assert_eq!(tr.associate(3, &[]).unwrap().retired, vec![1]);
        assert!(tr.tracks().is_empty());
    }

    #[test]
    fn duplicate_ids_and_order_errors() {
        let mut tr = Tracker::new(TrackerConfig::default(), 32);
        let d = Detection::new(0, Some(3), bbox(0.0, 0.0, 1.0, 1.0), 1.0, "car");
        assert_eq!(
            tr.associate(0, &[d.clone(), d.clone()]),
            Err(KinematicsError::DuplicateTrackId {
                frame: 0,
                track_id: 3
            })
        );
        let mut tr = Tracker::new(TrackerConfig::default(), 32);
        tr.associate(5, &[]).unwrap();
        assert!(matches!(
            tr.associate(5, &[]),
            Err(KinematicsError::FrameOrder { .. })
        ));
    }

    fn samples(par: &[f64], perp: &[f64]) -> Vec<ComponentSample> {
        par.iter()
            .zip(perp)
            .enumerate()
            .map(|(i, (&a, &b))| ComponentSample {
                frame: i as u64,
                v_par: a,
                v_perp: b,
            })
            .collect()
    }

    #[test]
    fn window_constant_flow() {
        let agg = aggregate_window(&samples(&[10.0; 3], &[0.0; 3]), 2, 10).unwrap();
        assert_eq!(
            (
                agg.mean_v_par,
                agg.max_abs_v_perp,
                agg.var_v_perp,
                agg.window_len
            ),
            (10.0, 0.0, 0.0, 3)
        );
    }

    #[test]
    fn window_keeps_alternating_lateral_motion() {
        let agg = aggregate_window(&samples(&[0.0; 3], &[3.0, -3.0, 3.0]), 2, 10).unwrap();
        assert_eq!(agg.max_abs_v_perp, 3.0);
        assert!((agg.var_v_perp - 8.0).abs() < 1e-12);
    }

    #[test]
    fn window_singleton() {
        let agg = aggregate_window(&samples(&[7.0], &[-2.0]), 0, 10).unwrap();
        assert_eq!(
            (agg.mean_v_par, agg.max_abs_v_perp, agg.var_v_perp),
            (7.0, 2.0, 0.0)
        );
    }

    #[test]
    fn window_excludes_old_samples() {
        let s = samples(&[1.0, 2.0, 3.0, 4.0], &[0.0; 4]);
        let agg = aggregate_window(&s, 3, 2).unwrap();
        assert_eq!((agg.mean_v_par, agg.window_len), (3.5, 2));
        assert_eq!(
            aggregate_window(&s, 9, 2),
            Err(KinematicsError::EmptyWindow)
        );
    }

    proptest! {
        #[test]
        fn velocity_is_translation_equivariant(
            pts in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 2..12),
            dx in -1e4f64..1e4, dy in -1e4f64..1e4,
        ) {
            let seq: Vec<(u64, (f64, f64))> = pts.iter().enumerate().map(|(i, p)| (i as u64, *p)).collect();
            let shifted: Vec<(u64, (f64, f64))> = seq.iter().map(|&(f, (x, y))| (f, (x + dx, y + dy))).collect();
            let (a, b) = (track_with(&seq), track_with(&shifted));
            for f in 1..seq.len() as u64 {
                let va = estimate_velocity(&a, f, 5).unwrap();
                let vb = estimate_velocity(&b, f, 5).unwrap();
                prop_assert!((va.x - vb.x).abs() < 1e-6 && (va.y - vb.y).abs() < 1e-6);
            }
        }

        #[test]
        fn max_abs_dominates_mean(perp in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
            let par = vec![0.0; perp.len()];
            let agg = aggregate_window(&samples(&par, &perp), perp.len() as u64 - 1, 100).unwrap();
            let mean = perp.iter().sum::<f64>() / perp.len() as f64;
            prop_assert!(agg.max_abs_v_perp + 1e-12 >= mean.abs());
            prop_assert!(agg.var_v_perp >= 0.0);
        }

        #[test]
        fn explicit_id_association_is_identity(
            frames in proptest::collection::vec(
                proptest::collection::btree_map(0u64..20, (0.0f64..500.0, 0.0f64..500.0), 0..8),
                1..15,
            )
        ) {
            let mut tr = Tracker::new(TrackerConfig { tau_lost: 100, ..Default::default() }, 64);
            for (f, objs) in frames.iter().enumerate() {
                let dets: Vec<Detection> = objs
                    .iter()
                    .map(|(&id, &(x, y))| Detection::new(f as u64, Some(id), at((x, y)), 1.0, "car"))
                    .collect();
                let a = tr.associate(f as u64, &dets).unwrap();
                prop_assert_eq!(a.observed, objs.keys().copied().collect::<Vec<_>>());
                for (&id, &(x, y)) in objs {
                    let c = tr.get(id).unwrap().position_at(f as u64).unwrap();
                    prop_assert!((c.x - x).abs() < 1e-9 && (c.y - y).abs() < 1e-9);
                }
            }
        }
    }
}
