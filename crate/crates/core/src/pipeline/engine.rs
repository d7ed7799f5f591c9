use super::PipelineError;
use crate::bayes::{EgoBelief, FrameEvidence, ScoringMode, SurpriseScore, Thresholds};
use crate::config::PipelineConfig;
use crate::frenet::{build_neighborhood, flow_axes, project, FrenetAxes, TrackState};
use crate::geom::{BBox, Vec2};
use crate::ingest::{Detection, DetectionBatch};
use crate::kinematics::{aggregate_window, ComponentSample, Tracker};
use crate::localization::{Diagnostics, Localizer, Trigger, TriggerPacket};
use crate::tiling::merge_detections;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};
use std::time::{Duration, Instant};

/// One line of the per-frame score log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub frame: u64,
    pub track: u64,
    pub s_par: f64,
    pub s_perp: f64,
    pub s_ego: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameOutput {
    pub scores: Vec<ScoreRecord>,
    /// Triggers fired at this frame as `(ego, score)`.
    pub triggers: Vec<(u64, SurpriseScore)>,
    /// Packets whose window closed at this frame.
    pub packets: Vec<TriggerPacket>,
}

/// Accumulated wall time per stage of the scoring thread.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub merge_s: f64,
    pub track_s: f64,
    pub score_s: f64,
    pub localize_s: f64,
}

#[derive(Debug, Default)]
struct EgoState {
    samples: VecDeque<ComponentSample>,
    belief: EgoBelief,
    heading: Option<Vec2>,
}

/// Single-camera streaming scorer: tracking, flow-aligned decomposition,
/// online posterior, surprise, triggers and deferred packets. Consumes one
/// frame at a time and never looks past the current frame.
pub struct Engine {
    config: PipelineConfig,
    tracker: Tracker,
    localizer: Localizer,
    thresholds: Thresholds,
    radius: f64,
    egos: HashMap<u64, EgoState>,
    last_frame: Option<u64>,
    frames_processed: u64,
    times: StageTimes,
}

impl Engine {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        config
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let history = (config.loc.tau_p as usize + 2)
            .max((config.kinematics.tau_h + config.tracker.delta_max) as usize + 2)
            .max(16);
        let thresholds = Thresholds::new(config.bayes.alpha_par, config.bayes.alpha_perp)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(Self {
            tracker: Tracker::new(config.tracker, history),
            localizer: Localizer::new(
                config.loc,
                &config.camera_id,
                (config.frame_w, config.frame_h),
            ),
            thresholds,
            radius: config.radius(),
            egos: HashMap::new(),
            last_frame: None,
            frames_processed: 0,
            times: StageTimes::default(),
            config,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn tracker(&self) -> &Tracker {
        &self.tracker
    }

    pub fn frames_processed(&self) -> u64 {
        self.frames_processed
    }

    pub fn last_frame(&self) -> Option<u64> {
        self.last_frame
    }

    pub fn stage_times(&self) -> StageTimes {
        self.times
    }

    fn merge_tiles(&self, detections: &[Detection]) -> Vec<Detection> {
        if detections.iter().all(|d| d.tile.is_none()) {
            return detections.to_vec();
        }
        let full = BBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: self.config.frame_w as f64,
            y_max: self.config.frame_h as f64,
        };
        let mut groups: Vec<(BBox, Vec<Detection>)> = Vec::new();
        for d in detections {
            let tile = d.tile.unwrap_or(full);
            match groups.iter_mut().find(|(t, _)| *t == tile) {
                Some((_, v)) => v.push(d.clone()),
                None => groups.push((tile, vec![d.clone()])),
            }
        }
        merge_detections(&groups, self.config.tiling.nms_iou)
    }

    pub fn process(&mut self, batch: &DetectionBatch) -> Result<FrameOutput, PipelineError> {
        let t = batch.frame_index;
        let t0 = Instant::now();
        let detections = self.merge_tiles(&batch.detections);
        let t1 = Instant::now();
        let assoc = self
            .tracker
            .associate(t, &detections)
            .map_err(PipelineError::Tracking)?;
        for id in &assoc.retired {
            self.egos.remove(id);
        }
        let t2 = Instant::now();

        let mut out = FrameOutput::default();
        let states: Vec<TrackState> = assoc
            .observed
            .iter()
            .filter_map(|id| {
                let tr = self.tracker.get(*id)?;
                Some(TrackState {
                    track_id: *id,
                    position: tr.last().center(),
                    velocity: tr.velocity_at(t)?,
                    age: tr.age,
                })
            })
            .collect();
        let tau_h = self.config.kinematics.tau_h;
        let eps = self.config.frenet.eps_flow;
        let mode = self.config.bayes.mode;
        for ego in &states {
            let hood = build_neighborhood(ego, &states, self.radius, self.config.frenet.tau_trk);
            let state = self.egos.entry(ego.track_id).or_default();
            let axes = if mode == ScoringMode::NoFrenet {
                Some(FrenetAxes::IMAGE)
            } else {
                let from_flow = hood.flow_vector.and_then(|f| flow_axes(f, eps).ok());
                let axes = from_flow.or_else(|| {
                    let track = self.tracker.get(ego.track_id)?;
                    let start = (t + 1).saturating_sub(tau_h);
                    let (sum, n) = track
                        .velocity_history()
                        .filter(|(f, _)| *f >= start && *f <= t)
                        .fold((Vec2::ZERO, 0usize), |(s, n), (_, v)| (s + *v, n + 1));
                    let own = if n > 0 {
                        sum * (1.0 / n as f64)
                    } else {
                        Vec2::ZERO
                    };
                    flow_axes(own, eps).ok().or_else(|| {
                        state.heading.map(|e| FrenetAxes {
                            e_par: e,
                            e_perp: e.rot90(),
                        })
                    })
                });
                if let Some(a) = axes {
                    state.heading = Some(a.e_par);
                }
                axes
            };
            let Some(axes) = axes else { continue };

            let own = project(ego.velocity, &axes);
            state.samples.push_back(ComponentSample {
                frame: t,
                v_par: own.v_par,
                v_perp: own.v_perp,
            });
            while state.samples.front().is_some_and(|s| s.frame + tau_h <= t) {
                state.samples.pop_front();
            }
            let Ok(agg) = aggregate_window(state.samples.iter(), t, tau_h) else {
                continue;
            };

            let (mut obs_par, mut obs_perp) = (
                Vec::with_capacity(hood.member_ids.len()),
                Vec::with_capacity(hood.member_ids.len()),
            );
            for s in states
                .iter()
                .filter(|s| hood.member_ids.binary_search(&s.track_id).is_ok())
            {
                let f = project(s.velocity, &axes);
                obs_par.push(f.v_par);
                obs_perp.push(f.v_perp);
            }
            let evidence = FrameEvidence {
                frame: t,
                obs_par: &obs_par,
                obs_perp: &obs_perp,
                flow_speed: hood.flow_vector.map(|f| f.dot(axes.e_par)),
            };
            let Some(posterior) = state.belief.update(&evidence, &self.config.bayes) else {
                continue;
            };
            let effective = crate::frenet::KinematicFeature {
                v_par: agg.mean_v_par,
                v_perp: agg.max_abs_v_perp,
            };
            let score = self.thresholds.score(effective, &posterior);
            out.scores.push(ScoreRecord {
                frame: t,
                track: ego.track_id,
                s_par: score.s_par,
                s_perp: score.s_perp,
                s_ego: score.s_ego,
            });

            if self.localizer.check(ego.track_id, &score, t) {
                let mut members = hood.member_ids.clone();
                members.push(ego.track_id);
                members.sort_unstable();
                let ego_class = self
                    .tracker
                    .get(ego.track_id)
                    .map(|tr| tr.class_label.clone())
                    .unwrap_or_default();
                out.triggers.push((ego.track_id, score));
                self.localizer.open(
                    Trigger {
                        t_a: t,
                        ego_id: ego.track_id,
                        ego_class,
                        member_ids: members,
                        scores: score,
                        diagnostics: Diagnostics {
                            v_par_eff: agg.mean_v_par,
                            v_perp_eff: agg.max_abs_v_perp,
                            var_perp: agg.var_v_perp,
                            posterior,
                        },
                    },
                    &self.tracker,
                );
            }
        }
        let t3 = Instant::now();
        out.packets = self
            .localizer
            .advance(t, &self.tracker)
            .map_err(PipelineError::Localization)?;
        let t4 = Instant::now();

        self.times.merge_s += secs(t1 - t0);
        self.times.track_s += secs(t2 - t1);
        self.times.score_s += secs(t3 - t2);
        self.times.localize_s += secs(t4 - t3);
        self.frames_processed += 1;
        self.last_frame = Some(t);
        Ok(out)
    }

    /// Flushes packets whose window was cut by the end of the stream.
    pub fn finish(&mut self) -> Result<Vec<TriggerPacket>, PipelineError> {
        self.localizer.finish().map_err(PipelineError::Localization)
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}
