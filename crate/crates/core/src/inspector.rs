//! Action inspector: short-horizon trajectory prediction, angular safety
//! margins, the action priority list and dangerous-action replacement.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dynamics::{step_kinematics, track_steer, ControlBounds, ControlInput, PathTarget, VehicleState, WHEELBASE};
use crate::env::Action;
use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Obb, Vec2};
use crate::world::{Lane, RingLane, RoundaboutLayout};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InspectorConfig {
    /// Prediction horizon in simulation steps.
    pub t_n: usize,
    pub dt: f64,
    /// Weights of safety, progress, lane preference and comfort.
    pub alpha: [f64; 4],
    pub d_safe: f64,
    /// Proportional speed gain of the predicted EV controller.
    pub speed_gain: f64,
    pub comfort_dv: f64,
    pub v_max: f64,
}

impl Default for InspectorConfig {
    fn default() -> Self {
        Self {
            t_n: 20,
            dt: 0.1,
            alpha: [1.0, 0.5, 0.2, 0.1],
            d_safe: 10.0,
            speed_gain: 1.0,
            comfort_dv: 2.0,
            v_max: 25.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedTrajectory {
    pub id: usize,
    /// Pose `(position, heading)` at steps `1..=T_n`.
    pub poses: Vec<(Vec2, f64)>,
}

/// What the EV intends before an action is applied.
#[derive(Clone, Copy, Debug)]
pub struct EvIntent<'a> {
    pub state: &'a VehicleState,
    /// Lane the EV is heading for (the merge lane while still on a leg).
    pub target_lane: RingLane,
    /// Entry port while the EV is still on its leg.
    pub leg: Option<usize>,
    /// Lane recommended by the route planner.
    pub preferred_lane: RingLane,
}

impl EvIntent<'_> {
    pub fn path(&self, lane: RingLane) -> PathTarget {
        match self.leg {
            Some(port) => PathTarget::Leg { port, merge: lane },
            None => PathTarget::Ring(lane),
        }
    }
}

/// Speed target and lane an action asks for.
pub fn action_target(action: Action, speed: f64, lane: RingLane, v_max: f64) -> (f64, RingLane) {
    match action {
        Action::Faster => ((speed + 2.0).min(v_max), lane),
        Action::Slower => ((speed - 2.0).max(0.0), lane),
        Action::Idle => (speed, lane),
        Action::TurnLeft => (speed, RingLane::Inner),
        Action::TurnRight => (speed, RingLane::Outer),
    }
}

/// All actions except a turn off the edge of the two-lane ring.
pub fn feasible_actions(lane: RingLane) -> Vec<Action> {
    Action::ALL
        .into_iter()
        .filter(|a| !matches!((a, lane), (Action::TurnLeft, RingLane::Inner) | (Action::TurnRight, RingLane::Outer)))
        .collect()
}

/// EV rollout under `action`: proportional speed control toward the action's
/// speed target plus the lane tracker.
pub fn predict_ev(layout: &RoundaboutLayout, ev: &EvIntent, action: Action, cfg: &InspectorConfig) -> PredictedTrajectory {
    let (v_target, lane) = action_target(action, ev.state.speed, ev.target_lane, cfg.v_max);
    let path = ev.path(lane);
    let bounds = ControlBounds::default();
    let mut s = ev.state.clone();
    let mut poses = Vec::with_capacity(cfg.t_n);
    for _ in 0..cfg.t_n {
        let accel = (cfg.speed_gain * (v_target - s.speed)).clamp(bounds.a_min, bounds.a_max);
        let steer = track_steer(layout, &s, path, cfg.dt, &bounds);
        s = step_kinematics(&s, ControlInput { accel, steer }, cfg.dt, WHEELBASE);
        poses.push((s.position, s.heading));
    }
    PredictedTrajectory { id: ev.state.id, poses }
}

/// Constant-speed lane following: the NV keeps its offset from its lane
/// centerline and slides along the lane network.
pub fn predict_nv(layout: &RoundaboutLayout, nv: &VehicleState, steps: usize, dt: f64) -> PredictedTrajectory {
    let base = layout.to_cartesian_unchecked(nv.lane_coord);
    let base_heading = layout.lane_heading(nv.lane_coord);
    let poses = (1..=steps)
        .map(|k| {
            if nv.speed == 0.0 {
                return (nv.position, nv.heading);
            }
            let c = layout.advance(nv.lane_coord, nv.speed * dt * k as f64);
            let p = nv.position + (layout.to_cartesian_unchecked(c) - base);
            (p, wrap_angle(nv.heading + layout.lane_heading(c) - base_heading))
        })
        .collect();
    PredictedTrajectory { id: nv.id, poses }
}

/// True iff the two footprints collide at any common step.
pub fn overlap(a: &PredictedTrajectory, b: &PredictedTrajectory, length: f64, width: f64) -> Result<bool> {
    if a.poses.len() != b.poses.len() {
        return Err(Error::LengthMismatch(a.poses.len(), b.poses.len()));
    }
    Ok(a.poses.iter().zip(&b.poses).any(|(&(pa, ha), &(pb, hb))| {
        pa.distance(pb) <= length + width && Obb::new(pa, ha, length, width).overlaps(&Obb::new(pb, hb, length, width))
    }))
}

/// Smallest angular separation about the ring center between the EV and any
/// NV over the horizon; `f64::INFINITY` without NVs.
pub fn safety_margin(ev: &PredictedTrajectory, nvs: &[PredictedTrajectory]) -> f64 {
    nvs.iter()
        .flat_map(|nv| {
            ev.poses
                .iter()
                .zip(&nv.poses)
                .map(|((pe, _), (pn, _))| wrap_angle(pe.angle() - pn.angle()).abs())
        })
        .fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorityList {
    /// Actions with their scores, best first.
    pub entries: Vec<(Action, f64)>,
}

impl PriorityList {
    pub fn actions(&self) -> Vec<Action> {
        self.entries.iter().map(|(a, _)| *a).collect()
    }

    /// Same list with `proposed` moved to the front when it is present.
    pub fn with_first(&self, proposed: Action) -> PriorityList {
        let mut entries = self.entries.clone();
        if let Some(i) = entries.iter().position(|(a, _)| *a == proposed) {
            let e = entries.remove(i);
            entries.insert(0, e);
        }
        PriorityList { entries }
    }
}

/// Scores every feasible action by
/// `α1·margin/π + α2·progress + α3·[lane = preferred] − α4·|Δv|/Δv_ref`
/// and sorts them best first, ties by action index. Progress is the
/// predicted distance travelled, min-max scaled across the candidates.
pub fn priority_list(layout: &RoundaboutLayout, ev: &EvIntent, nvs: &[VehicleState], cfg: &InspectorConfig) -> PriorityList {
    let nv_traj: Vec<PredictedTrajectory> = nvs.iter().map(|nv| predict_nv(layout, nv, cfg.t_n, cfg.dt)).collect();
    let actions = feasible_actions(ev.target_lane);
    let raw: Vec<(Action, f64, f64, f64, f64)> = actions
        .iter()
        .map(|&a| {
            let traj = predict_ev(layout, ev, a, cfg);
            let margin = safety_margin(&traj, &nv_traj).min(PI) / PI;
            let mut travelled = 0.0;
            let mut prev = ev.state.position;
            for (p, _) in &traj.poses {
                travelled += prev.distance(*p);
                prev = *p;
            }
            let (v_target, lane) = action_target(a, ev.state.speed, ev.target_lane, cfg.v_max);
            let lane_bonus = if lane == ev.preferred_lane { 1.0 } else { 0.0 };
            let comfort = -(v_target - ev.state.speed).abs() / cfg.comfort_dv;
            (a, margin, travelled, lane_bonus, comfort)
        })
        .collect();
    let lo = raw.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    let hi = raw.iter().map(|r| r.2).fold(f64::NEG_INFINITY, f64::max);
    let [a1, a2, a3, a4] = cfg.alpha;
    let mut entries: Vec<(Action, f64)> = raw
        .into_iter()
        .map(|(a, margin, travelled, lane, comfort)| {
            let progress = if hi > lo { (travelled - lo) / (hi - lo) } else { 0.0 };
            (a, a1 * margin + a2 * progress + a3 * lane + a4 * comfort)
        })
        .collect();
    entries.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.index().cmp(&y.0.index())));
    PriorityList { entries }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecMode {
    Direct,
    IdmFollow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectCause {
    /// Predicted overlap with an NV outside the EV's lane.
    AdjacentOverlap { nv: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub action: Action,
    pub mode: ExecMode,
    pub order: Vec<Action>,
    pub rejected: Vec<(Action, RejectCause)>,
    /// Same-lane front NV that triggered IDM following.
    pub front: Option<usize>,
}

/// True when `nv` is ahead of the EV in the lane the EV currently occupies.
pub fn is_same_lane_front(layout: &RoundaboutLayout, ev: &EvIntent, nv: &VehicleState) -> bool {
    let rel = nv.position - ev.state.position;
    if rel.dot(Vec2::unit(ev.state.heading)) <= 0.0 {
        return false;
    }
    match ev.leg {
        Some(port) => nv.lane_coord.lane == Lane::EntryLeg(port),
        None => nv.lane_coord.lane.ring() == Some(layout.ring_lane_at(ev.state.position.norm())),
    }
}

/// Walks the list: the first candidate whose predicted footprint clears every
/// NV within `D_safe` is executed directly; an overlap with the same-lane
/// front NV switches to IDM following; any other overlap discards the
/// candidate. An exhausted list also falls back to IDM following.
pub fn execute(layout: &RoundaboutLayout, list: &PriorityList, ev: &EvIntent, nvs: &[VehicleState], cfg: &InspectorConfig) -> Decision {
    let near: Vec<(&VehicleState, PredictedTrajectory)> = nvs
        .iter()
        .filter(|nv| nv.position.distance(ev.state.position) <= cfg.d_safe)
        .map(|nv| (nv, predict_nv(layout, nv, cfg.t_n, cfg.dt)))
        .collect();
    let order = list.actions();
    let mut rejected = Vec::new();
    for &a in &order {
        let traj = predict_ev(layout, ev, a, cfg);
        let mut clear = true;
        for (nv, nv_traj) in &near {
            if overlap(&traj, nv_traj, ev.state.length, ev.state.width).expect("equal horizons") {
                if is_same_lane_front(layout, ev, nv) {
                    return Decision { action: Action::Idle, mode: ExecMode::IdmFollow, order, rejected, front: Some(nv.id) };
                }
                rejected.push((a, RejectCause::AdjacentOverlap { nv: nv.id }));
                clear = false;
                break;
            }
        }
        if clear {
            return Decision { action: a, mode: ExecMode::Direct, order, rejected, front: None };
        }
    }
    Decision { action: Action::Idle, mode: ExecMode::IdmFollow, order, rejected, front: None }
}
