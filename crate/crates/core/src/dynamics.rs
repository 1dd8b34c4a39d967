//! Vehicle kinematics, the IDM car-following law and the pure-pursuit lane tracker.

use serde::{Deserialize, Serialize};

use crate::geom::{wrap_angle, Obb, Vec2};
use crate::world::{Lane, LaneCoord, RingLane, RoundaboutLayout};

pub const VEHICLE_LENGTH: f64 = 5.0;
pub const VEHICLE_WIDTH: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Ev,
    Hdv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: usize,
    pub position: Vec2,
    pub speed: f64,
    pub heading: f64,
    pub lane_coord: LaneCoord,
    pub length: f64,
    pub width: f64,
    pub role: Role,
}

impl VehicleState {
    pub fn new(id: usize, role: Role, position: Vec2, speed: f64, heading: f64, lane_coord: LaneCoord) -> Self {
        Self {
            id,
            position,
            speed: speed.max(0.0),
            heading: wrap_angle(heading),
            lane_coord,
            length: VEHICLE_LENGTH,
            width: VEHICLE_WIDTH,
            role,
        }
    }

    pub fn footprint(&self) -> Obb {
        Obb::new(self.position, self.heading, self.length, self.width)
    }

    pub fn on_ring(&self) -> bool {
        self.lane_coord.lane.ring().is_some()
    }

    pub fn on_exit_leg(&self) -> bool {
        matches!(self.lane_coord.lane, Lane::ExitLeg(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub accel: f64,
    pub steer: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlBounds {
    pub a_min: f64,
    pub a_max: f64,
    pub steer_min: f64,
    pub steer_max: f64,
}

impl Default for ControlBounds {
    fn default() -> Self {
        Self {
            a_min: -5.0,
            a_max: 3.0,
            steer_min: -0.6,
            steer_max: 0.6,
        }
    }
}

impl ControlBounds {
    pub fn clamp(&self, input: ControlInput) -> ControlInput {
        ControlInput {
            accel: input.accel.clamp(self.a_min, self.a_max),
            steer: input.steer.clamp(self.steer_min, self.steer_max),
        }
    }

    pub fn contains(&self, input: ControlInput) -> bool {
        (self.a_min..=self.a_max).contains(&input.accel) && (self.steer_min..=self.steer_max).contains(&input.steer)
    }
}

pub const WHEELBASE: f64 = 2.5;

/// One explicit-Euler step of the kinematic model. Position and heading use
/// the speed and heading at the start of the step; speed never goes negative.
/// The lane coordinate is left for the caller to refresh.
pub fn step_kinematics(state: &VehicleState, input: ControlInput, dt: f64, wheelbase: f64) -> VehicleState {
    let mut next = state.clone();
    let v = state.speed;
    next.position = state.position + Vec2::unit(state.heading) * (v * dt);
    next.speed = (v + input.accel * dt).max(0.0);
    next.heading = wrap_angle(state.heading + v / wheelbase * input.steer.tan() * dt);
    next
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmParams {
    pub a_max: f64,
    /// Expected (desired) speed.
    pub v_e: f64,
    /// Expected standstill spacing.
    pub h_e: f64,
    /// Expected time gap.
    pub t_e: f64,
    /// Comfortable deceleration.
    pub c: f64,
    /// Largest deceleration the law may command.
    pub brake_limit: f64,
    /// Use the follower's own speed in the free-road term instead of the leader's.
    pub idm_ego_speed_variant: bool,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            a_max: 3.0,
            v_e: 25.0,
            h_e: 4.0,
            t_e: 1.5,
            c: 3.0,
            brake_limit: 9.0,
            idm_ego_speed_variant: false,
        }
    }
}

/// Vehicle ahead as seen by an IDM follower.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Leader {
    pub speed: f64,
    /// Bumper-to-bumper gap.
    pub gap: f64,
}

/// `h* = h_e + v·T_e − v·Δv / (2√(a_max·c))`, floored at `h_e`.
///
/// `delta_v` is the leader's speed minus the follower's, so a closing leader
/// (negative `delta_v`) widens the desired gap.
pub fn desired_gap(v_av: f64, delta_v: f64, params: &IdmParams) -> f64 {
    let h = params.h_e + v_av * params.t_e - v_av * delta_v / (2.0 * (params.a_max * params.c).sqrt());
    h.max(params.h_e)
}

/// IDM acceleration. With the default parameters the free-road term uses the
/// leader's speed, `a_max·[1 − (v_leader/v_e)^4 − (h*/h)^2]`; set
/// `idm_ego_speed_variant` for the textbook form that uses the follower's speed.
/// Without a leader only the free-road term (on the follower's speed) applies.
pub fn idm_acceleration(ego_speed: f64, leader: Option<Leader>, params: &IdmParams) -> f64 {
    let out = match leader {
        None => params.a_max * (1.0 - (ego_speed / params.v_e).powi(4)),
        Some(l) if l.gap <= 0.0 => -params.brake_limit,
        Some(l) => {
            let ratio_speed = if params.idm_ego_speed_variant { ego_speed } else { l.speed };
            let h_star = desired_gap(ego_speed, l.speed - ego_speed, params);
            params.a_max * (1.0 - (ratio_speed / params.v_e).powi(4) - (h_star / l.gap).powi(2))
        }
    };
    out.clamp(-params.brake_limit, params.a_max)
}

/// Pure-pursuit steering toward `target`.
pub fn pure_pursuit_steer(state: &VehicleState, target: Vec2, wheelbase: f64, bounds: &ControlBounds) -> f64 {
    let rel = target - state.position;
    let ld = rel.norm();
    if ld < 1e-9 {
        return 0.0;
    }
    let alpha = wrap_angle(rel.y.atan2(rel.x) - state.heading);
    (2.0 * wheelbase * alpha.sin() / ld).atan().clamp(bounds.steer_min, bounds.steer_max)
}

/// Centerline the lane tracker follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathTarget {
    /// Inbound along an entry leg, then onto `merge` at the entry angle.
    Leg { port: usize, merge: RingLane },
    Ring(RingLane),
}

/// Lookahead distance of the lane tracker.
pub const LOOKAHEAD: f64 = 5.0;

/// Point `ld` metres ahead of `pos` along the centerline of `target`.
pub fn lookahead_point(layout: &RoundaboutLayout, pos: Vec2, target: PathTarget, ld: f64) -> Vec2 {
    match target {
        PathTarget::Ring(lane) => {
            let r = layout.lane_radius(lane);
            Vec2::from_polar(r, pos.angle() + ld / r)
        }
        PathTarget::Leg { port, merge } => {
            let a = layout.entry_angle(port);
            let to_line = pos.dot(Vec2::unit(a)) - layout.outer_radius;
            if ld <= to_line {
                Vec2::from_polar(layout.outer_radius + to_line - ld, a)
            } else {
                let r = layout.lane_radius(merge);
                Vec2::from_polar(r, a + (ld - to_line.max(0.0)) / r)
            }
        }
    }
}

/// Steering that follows `target` with pure pursuit. The pursuit geometry is
/// evaluated half a step ahead, which cancels most of the outward drift the
/// explicit Euler update adds on curved lanes.
pub fn track_steer(layout: &RoundaboutLayout, state: &VehicleState, target: PathTarget, dt: f64, bounds: &ControlBounds) -> f64 {
    let mut probe = state.clone();
    probe.position = state.position + Vec2::unit(state.heading) * (0.5 * state.speed * dt);
    let p = lookahead_point(layout, probe.position, target, LOOKAHEAD);
    pure_pursuit_steer(&probe, p, WHEELBASE, bounds)
}
