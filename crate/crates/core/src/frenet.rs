//! Flow-aligned (Frenet) decomposition of ego velocity.
//!
//! The longitudinal axis follows the mean velocity of same-direction
//! neighbours; the lateral axis is that axis rotated by +90 degrees.

use crate::geom::Vec2;
use crate::kinematics::VelocityVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FrenetError {
    #[error("flow speed {speed} below minimum {eps}")]
    DegenerateFlow { speed: f64, eps: f64 },
}

/// Kinematic snapshot of one track at the current frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackState {
    pub track_id: u64,
    pub position: Vec2,
    pub velocity: VelocityVector,
    pub age: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub ego_id: u64,
    /// Ascending member ids; never contains the ego.
    pub member_ids: Vec<u64>,
    pub radius: f64,
    /// Mean member velocity, `None` for an empty neighbourhood.
    pub flow_vector: Option<VelocityVector>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrenetAxes {
    pub e_par: Vec2,
    pub e_perp: Vec2,
}

impl FrenetAxes {
    /// Image x/y axes, used when flow alignment is disabled.
    pub const IMAGE: FrenetAxes = FrenetAxes {
        e_par: Vec2::new(1.0, 0.0),
        e_perp: Vec2::new(0.0, 1.0),
    };
}

/// Flow-aligned velocity components `[v_par, v_perp]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicFeature {
    pub v_par: f64,
    pub v_perp: f64,
}

/// Minimum cosine between two headings for them to count as co-directional.
/// Keeps exactly perpendicular headings out regardless of coordinate roundoff.
pub const CODIRECTIONAL_COS: f64 = 1e-9;

/// Same-direction tracks within `radius` of the ego that have been tracked
/// for at least `tau_trk` frames.
pub fn build_neighborhood(
    ego: &TrackState,
    others: &[TrackState],
    radius: f64,
    tau_trk: u64,
) -> Neighborhood {
    let mut member_ids = Vec::new();
    let mut sum = Vec2::ZERO;
    for j in others {
        if j.track_id == ego.track_id {
            continue;
        }
        if (j.position - ego.position).norm() <= radius
            && j.velocity.dot(ego.velocity)
                > CODIRECTIONAL_COS * j.velocity.norm() * ego.velocity.norm()
            && j.age >= tau_trk
        {
            member_ids.push(j.track_id);
            sum = sum + j.velocity;
        }
    }
    member_ids.sort_unstable();
    let flow_vector = (!member_ids.is_empty()).then(|| sum * (1.0 / member_ids.len() as f64));
    Neighborhood {
        ego_id: ego.track_id,
        member_ids,
        radius,
        flow_vector,
    }
}

pub fn flow_axes(flow: VelocityVector, eps_flow: f64) -> Result<FrenetAxes, FrenetError> {
    let speed = flow.norm();
    if !(speed >= eps_flow) || speed == 0.0 {
        return Err(FrenetError::DegenerateFlow {
            speed,
            eps: eps_flow,
        });
    }
    let e_par = flow * (1.0 / speed);
    Ok(FrenetAxes {
        e_par,
        e_perp: e_par.rot90(),
    })
}

pub fn project(v: VelocityVector, axes: &FrenetAxes) -> KinematicFeature {
    KinematicFeature {
        v_par: v.dot(axes.e_par),
        v_perp: v.dot(axes.e_perp),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::SQRT_2;

    fn st(id: u64, p: (f64, f64), v: (f64, f64), age: u64) -> TrackState {
        TrackState {
            track_id: id,
            position: Vec2::new(p.0, p.1),
            velocity: Vec2::new(v.0, v.1),
            age,
        }
    }

    #[test]
    fn membership_conditions() {
        let ego = st(0, (0.0, 0.0), (5.0, 0.0), 20);
        let others = [
            st(1, (50.0, 0.0), (4.0, 0.0), 20),
            st(2, (50.0, 0.0), (-4.0, 0.0), 20),
            st(3, (500.0, 0.0), (5.0, 0.0), 20),
        ];
        let n = build_neighborhood(&ego, &others, 100.0, 5);
        assert_eq!(n.member_ids, vec![1]);
        assert_eq!(n.flow_vector, Some(Vec2::new(4.0, 0.0)));
    }

    #[test]
    fn empty_scene_and_age_gate() {
        let ego = st(0, (0.0, 0.0), (5.0, 0.0), 20);
        let n = build_neighborhood(&ego, &[], 100.0, 5);
        assert!(n.member_ids.is_empty() && n.flow_vector.is_none());
        let young = [
            st(1, (10.0, 0.0), (5.0, 0.0), 3),
            st(2, (20.0, 0.0), (5.0, 0.0), 4),
        ];
        assert!(build_neighborhood(&ego, &young, 100.0, 5)
            .member_ids
            .is_empty());
    }

    #[test]
    fn axes_examples() {
        let a = flow_axes(Vec2::new(2.0, 0.0), 0.1).unwrap();
        assert_eq!(
            (a.e_par, a.e_perp),
            (Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0))
        );
        let b = flow_axes(Vec2::new(3.0, 4.0), 0.1).unwrap();
        assert!((b.e_par.x - 0.6).abs() < 1e-15 && (b.e_par.y - 0.8).abs() < 1e-15);
        assert!((b.e_perp.x + 0.8).abs() < 1e-15 && (b.e_perp.y - 0.6).abs() < 1e-15);
        assert!(matches!(
            flow_axes(Vec2::ZERO, 0.1),
            Err(FrenetError::DegenerateFlow { .. })
        ));
        assert!(flow_axes(Vec2::new(0.05, 0.0), 0.1).is_err());
    }

    #[test]
    fn projection_examples() {
        let f = project(Vec2::new(3.0, 4.0), &FrenetAxes::IMAGE);
        assert_eq!((f.v_par, f.v_perp), (3.0, 4.0));
        let diag = flow_axes(Vec2::new(1.0, 1.0), 0.1).unwrap();
        let g = project(Vec2::new(2.0, 0.0), &diag);
        assert!((g.v_par - SQRT_2).abs() < 1e-12 && (g.v_perp + SQRT_2).abs() < 1e-12);
        let along = flow_axes(Vec2::new(-7.0, 2.0), 0.1).unwrap();
        let s = 3.3;
        let h = project(along.e_par * s, &along);
        assert!((h.v_par - s).abs() < 1e-12 && h.v_perp.abs() < 1e-12);
    }

    fn arb_vec(r: f64) -> impl Strategy<Value = Vec2> {
        (-r..r, -r..r).prop_map(|(x, y)| Vec2::new(x, y))
    }

    fn arb_scene() -> impl Strategy<Value = Vec<TrackState>> {
        proptest::collection::vec((arb_vec(400.0), arb_vec(20.0), 0u64..12), 1..12).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (p, vel, age))| TrackState {
                    track_id: i as u64,
                    position: p,
                    velocity: vel,
                    age,
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn axes_are_orthonormal(flow in arb_vec(50.0)) {
            prop_assume!(flow.norm() >= 0.1);
            let a = flow_axes(flow, 0.1).unwrap();
            prop_assert!((a.e_par.norm() - 1.0).abs() <= 1e-9);
            prop_assert!((a.e_perp.norm() - 1.0).abs() <= 1e-9);
            prop_assert!(a.e_par.dot(a.e_perp).abs() <= 1e-9);
            prop_assert_eq!(a.e_perp, a.e_par.rot90());
        }

        #[test]
        fn projection_reconstructs_and_preserves_energy(v in arb_vec(50.0), flow in arb_vec(50.0)) {
            prop_assume!(flow.norm() >= 0.1);
            let a = flow_axes(flow, 0.1).unwrap();
            let k = project(v, &a);
            let back = a.e_par * k.v_par + a.e_perp * k.v_perp;
            prop_assert!((back - v).norm() <= 1e-9);
            prop_assert!((k.v_par.powi(2) + k.v_perp.powi(2) - v.dot(v)).abs() <= 1e-9 * (1.0 + v.dot(v)));
        }

        #[test]
        fn rotation_leaves_components_unchanged(scene in arb_scene(), theta in -3.2f64..3.2) {
            let rotated: Vec<TrackState> = scene
                .iter()
                .map(|s| TrackState { position: s.position.rotate(theta), velocity: s.velocity.rotate(theta), ..*s })
                .collect();
            for (ego, ego_r) in scene.iter().zip(&rotated) {
                let n = build_neighborhood(ego, &scene, 150.0, 3);
                let nr = build_neighborhood(ego_r, &rotated, 150.0, 3);
                if let (Some(f), Some(fr)) = (n.flow_vector, nr.flow_vector) {
                    if let (Ok(a), Ok(ar)) = (flow_axes(f, 0.1), flow_axes(fr, 0.1)) {
                        let (k, kr) = (project(ego.velocity, &a), project(ego_r.velocity, &ar));
                        prop_assert!((k.v_par - kr.v_par).abs() < 1e-9);
                        prop_assert!((k.v_perp - kr.v_perp).abs() < 1e-9);
                    }
                }
            }
        }

        #[test]
        fn translation_leaves_neighborhoods_unchanged(scene in arb_scene(), shift in arb_vec(1e4)) {
            let moved: Vec<TrackState> = scene.iter().map(|s| TrackState { position: s.position + shift, ..*s }).collect();
            for (ego, ego_m) in scene.iter().zip(&moved) {
                prop_assert_eq!(
                    build_neighborhood(ego, &scene, 150.0, 3).member_ids,
                    build_neighborhood(ego_m, &moved, 150.0, 3).member_ids
                );
            }
        }

        #[test]
        fn larger_radius_never_drops_members(scene in arb_scene(), r in 1.0f64..300.0, extra in 0.0f64..300.0) {
            for ego in &scene {
                let small = build_neighborhood(ego, &scene, r, 3).member_ids;
                let big = build_neighborhood(ego, &scene, r + extra, 3).member_ids;
                prop_assert!(small.iter().all(|m| big.contains(m)));
            }
        }
    }
}
