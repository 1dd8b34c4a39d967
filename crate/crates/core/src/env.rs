//! The episodic roundabout task: spawning, HDV rules, observation, reward,
//! collision detection and the inspector → controller → kinematics pipeline.

use std::f64::consts::{FRAC_PI_2, TAU};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    idm_acceleration, step_kinematics, track_steer, ControlInput, IdmParams, Leader, PathTarget, Role,
    VehicleState, VEHICLE_LENGTH, WHEELBASE,
};
use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Vec2};
use crate::inspector::{action_target, execute, feasible_actions, predict_nv, priority_list, Decision, EvIntent, ExecMode, InspectorConfig};
use crate::mpc::{MpcConfig, MpcController, Obstacle};
use crate::planner::{initial_lane, route_lane, PlannerWeights};
use crate::world::{Lane, LaneCoord, LayoutConfig, RingLane, RoadGraph, RoundaboutLayout};

/// How far past the entry line the EV's front must be before it stops yielding.
const COMMIT_MARGIN: f64 = 0.5;
/// Free leg length an arriving HDV needs in front of it.
const SPAWN_CLEARANCE: f64 = 25.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Faster,
    Slower,
    Idle,
    TurnRight,
    TurnLeft,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Faster, Action::Slower, Action::Idle, Action::TurnRight, Action::TurnLeft];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Normal,
    Hard,
}

impl Mode {
    pub fn initial_hdvs(self) -> usize {
        match self {
            Mode::Normal => 6,
            Mode::Hard => 10,
        }
    }

    /// Poisson arrival rate per entrance, vehicles per second.
    pub fn inflow_rate(self) -> f64 {
        match self {
            Mode::Normal => 0.1,
            Mode::Hard => 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpawnJitter {
    /// Half-width of the arc-length jitter, metres.
    pub position: f64,
    /// Half-width of the speed jitter, m/s.
    pub speed: f64,
}

impl Default for SpawnJitter {
    fn default() -> Self {
        Self { position: 4.0, speed: 2.0 }
    }
}

/// Weights of collision, speed, lane change, headway and arrival.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub w5: f64,
    /// Subtracted once per window of prolonged slow IDM following.
    pub slow_penalty: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { w1: -10.0, w2: 0.4, w3: -0.1, w4: 0.1, w5: 1.0, slow_penalty: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Controller {
    Mpc,
    /// Apply the action's speed target at the largest permitted rate.
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Pipeline {
    pub inspector: bool,
    pub controller: Controller,
}

impl Default for Pipeline {
    fn default() -> Self {
        Self { inspector: true, controller: Controller::Mpc }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub mode: Mode,
    pub n_initial_hdvs: usize,
    pub spawn_jitter: SpawnJitter,
    pub seed: u64,
    pub max_steps: usize,
    pub dt_sim: f64,
    pub policy_period: f64,
    pub layout: LayoutConfig,
    pub idm: IdmParams,
    pub reward: RewardWeights,
    pub k_neighbors: usize,
    pub sensing_range: f64,
    pub v_max: f64,
    pub d_safe: f64,
    pub hdv_speed: f64,
    pub ev_speed: f64,
    pub inflow_rate: f64,
    pub max_hdvs: usize,
    /// Ring stretch upstream and downstream of a merge point that blocks entry.
    pub conflict_upstream: f64,
    pub conflict_downstream: f64,
    pub leader_range: f64,
    pub lane_change_time: f64,
    /// Seconds of slow IDM following before the penalty applies.
    pub slow_window: f64,
    pub planner: PlannerWeights,
    pub inspector: InspectorConfig,
    pub mpc: MpcConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Self::new(Mode::Normal, 0)
    }
}

impl Scenario {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            n_initial_hdvs: mode.initial_hdvs(),
            spawn_jitter: SpawnJitter::default(),
            seed,
            max_steps: 120,
            dt_sim: 0.1,
            policy_period: 1.0,
            layout: LayoutConfig::default(),
            idm: IdmParams { idm_ego_speed_variant: true, ..IdmParams::default() },
            reward: RewardWeights::default(),
            k_neighbors: 5,
            sensing_range: 60.0,
            v_max: 25.0,
            d_safe: 10.0,
            hdv_speed: 12.0,
            ev_speed: 8.0,
            inflow_rate: mode.inflow_rate(),
            max_hdvs: 16,
            conflict_upstream: 40.0,
            conflict_downstream: 10.0,
            leader_range: 100.0,
            lane_change_time: 2.0,
            slow_window: 3.0,
            planner: PlannerWeights::default(),
            inspector: InspectorConfig::default(),
            mpc: MpcConfig::default(),
        }
    }

    /// Same scenario with the mode's HDV count and inflow rate.
    pub fn with_mode(self, mode: Mode) -> Self {
        Self { mode, n_initial_hdvs: mode.initial_hdvs(), inflow_rate: mode.inflow_rate(), ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        if !(self.dt_sim > 0.0) || !(self.policy_period >= self.dt_sim) {
            return bad("need 0 < dt_sim <= policy_period");
        }
        if self.k_neighbors == 0 || !(self.sensing_range > 0.0) || !(self.v_max > 0.0) || !(self.d_safe > 0.0) {
            return bad("observation ranges must be positive");
        }
        if !(self.reward.w1 < 0.0) || !(self.reward.w5 > 0.0) {
            return bad("reward needs w1 < 0 and w5 > 0");
        }
        if self.spawn_jitter.position < 0.0 || self.spawn_jitter.speed < 0.0 || self.inflow_rate < 0.0 {
            return bad("jitter and inflow must be non-negative");
        }
        if self.n_initial_hdvs > self.max_hdvs {
            return bad("more initial HDVs than the vehicle cap");
        }
        RoundaboutLayout::build(&self.layout)?;
        Ok(())
    }

    pub fn observation_width(&self) -> usize {
        5 + 6 * self.k_neighbors
    }

    pub fn substeps(&self) -> usize {
        (self.policy_period / self.dt_sim).round().max(1.0) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum HdvPhase {
    Approach(usize),
    Ring(RingLane),
    Exit(usize),
}

/// A rule-driven vehicle. On legs it moves by `s`; on the ring by `angle`
/// and `radius`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hdv {
    pub state: VehicleState,
    pub phase: HdvPhase,
    pub exit_port: usize,
    pub s: f64,
    pub angle: f64,
    pub radius: f64,
    /// Angle still to travel before the outlet.
    pub remaining: f64,
    /// Lane being left and time spent so far while changing lanes.
    pub changing: Option<(RingLane, f64)>,
}

impl Hdv {
    pub fn on_ring(layout: &RoundaboutLayout, id: usize, lane: RingLane, angle: f64, speed: f64, exit_port: usize) -> Self {
        let angle = angle.rem_euclid(TAU);
        let mut h = Hdv {
            state: VehicleState::new(id, Role::Hdv, Vec2::ZERO, speed, 0.0, LaneCoord::new(lane.into(), 0.0)),
            phase: HdvPhase::Ring(lane),
            exit_port,
            s: 0.0,
            angle,
            radius: layout.lane_radius(lane),
            remaining: RoundaboutLayout::ccw_delta(angle, layout.exit_angle(exit_port)),
            changing: None,
        };
        h.refresh(layout, 0.0);
        h
    }

    pub fn on_approach(layout: &RoundaboutLayout, id: usize, port: usize, s: f64, speed: f64, exit_port: usize) -> Self {
        let mut h = Hdv {
            state: VehicleState::new(id, Role::Hdv, Vec2::ZERO, speed, 0.0, LaneCoord::new(Lane::EntryLeg(port), s)),
            phase: HdvPhase::Approach(port),
            exit_port,
            s,
            angle: 0.0,
            radius: 0.0,
            remaining: 0.0,
            changing: None,
        };
        h.refresh(layout, 0.0);
        h
    }

    /// Ring lanes the body overlaps.
    pub fn ring_lanes(&self) -> [bool; 2] {
        let mut m = [false; 2];
        if let HdvPhase::Ring(l) = self.phase {
            m[l.index()] = true;
            if let Some((from, _)) = self.changing {
                m[from.index()] = true;
            }
        }
        m
    }

    fn refresh(&mut self, layout: &RoundaboutLayout, radial_rate: f64) {
        let st = &mut self.state;
        match self.phase {
            HdvPhase::Approach(p) | HdvPhase::Exit(p) => {
                let lane = if matches!(self.phase, HdvPhase::Approach(_)) { Lane::EntryLeg(p) } else { Lane::ExitLeg(p) };
                let c = LaneCoord::new(lane, self.s);
                st.position = layout.to_cartesian_unchecked(c);
                st.heading = wrap_angle(layout.lane_heading(c));
                st.lane_coord = c;
            }
            HdvPhase::Ring(lane) => {
                self.angle = self.angle.rem_euclid(TAU);
                st.position = Vec2::from_polar(self.radius, self.angle);
                let slip = if st.speed > 1e-9 { radial_rate.atan2(st.speed) } else { 0.0 };
                st.heading = wrap_angle(self.angle + FRAC_PI_2 + slip);
                st.lane_coord = LaneCoord::new(lane.into(), self.angle * layout.lane_radius(lane));
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoVehicle {
    pub state: VehicleState,
    pub entry_port: usize,
    pub exit_port: usize,
    /// Entry port while still on the entrance leg.
    pub leg: Option<usize>,
    pub target_lane: RingLane,
    pub v_target: f64,
    /// Unwrapped angle travelled on the ring and the angle that reaches the outlet.
    pub progress: f64,
    pub goal: f64,
    last_angle: f64,
}

impl EgoVehicle {
    /// EV `s` metres down the entrance leg of `port`, aligned with it.
    pub fn on_leg(layout: &RoundaboutLayout, port: usize, s: f64, speed: f64, exit_port: usize, target_lane: RingLane) -> Self {
        let c = LaneCoord::new(Lane::EntryLeg(port), s);
        let state = VehicleState::new(0, Role::Ev, layout.to_cartesian_unchecked(c), speed, layout.lane_heading(c), c);
        EgoVehicle {
            state,
            entry_port: port,
            exit_port,
            leg: Some(port),
            target_lane,
            v_target: speed,
            progress: 0.0,
            goal: 0.0,
            last_angle: 0.0,
        }
    }

    /// EV already circulating at `angle` on the centerline of `lane`.
    pub fn on_ring(layout: &RoundaboutLayout, lane: RingLane, angle: f64, speed: f64, exit_port: usize) -> Self {
        let c = LaneCoord::new(lane.into(), angle.rem_euclid(TAU) * layout.lane_radius(lane));
        let state = VehicleState::new(0, Role::Ev, layout.to_cartesian_unchecked(c), speed, layout.lane_heading(c), c);
        let mut ev = EgoVehicle {
            state,
            entry_port: layout.sector_of(angle),
            exit_port,
            leg: None,
            target_lane: lane,
            v_target: speed,
            progress: 0.0,
            goal: 0.0,
            last_angle: 0.0,
        };
        ev.enter_ring(layout);
        ev
    }

    fn enter_ring(&mut self, layout: &RoundaboutLayout) {
        self.leg = None;
        let a = self.state.position.angle();
        self.last_angle = a;
        self.progress = 0.0;
        self.goal = RoundaboutLayout::ccw_delta(a, layout.exit_angle(self.exit_port));
    }

    pub fn path(&self) -> PathTarget {
        match self.leg {
            Some(port) => PathTarget::Leg { port, merge: self.target_lane },
            None => PathTarget::Ring(self.target_lane),
        }
    }

    fn update_lane_coord(&mut self, layout: &RoundaboutLayout) {
        let lane = match self.leg {
            Some(p) => Lane::EntryLeg(p),
            None => layout.ring_lane_at(self.state.position.norm()).into(),
        };
        self.state.lane_coord = layout.from_cartesian(lane, self.state.position);
    }
}

/// Per-HDV command from the priority rules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HdvCommand {
    pub id: usize,
    pub accel: f64,
    /// Held at the entry line by an occupied conflict zone.
    pub hold: bool,
    /// Speed the command drives toward: 0 when held, a neighbour's speed when
    /// matching, `None` for the IDM expected speed.
    pub speed_target: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
struct RingEntry {
    id: usize,
    angle: f64,
    speed: f64,
    lanes: [bool; 2],
}

/// Pairs `(a, b)` with `a < b` by id whose oriented footprints overlap.
pub fn detect_collisions(vehicles: &[VehicleState]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, a) in vehicles.iter().enumerate() {
        for b in &vehicles[i + 1..] {
            let reach = 0.5 * (a.length.hypot(a.width) + b.length.hypot(b.width));
            if a.position.distance(b.position) <= reach && a.footprint().overlaps(&b.footprint()) {
                out.push((a.id.min(b.id), a.id.max(b.id)));
            }
        }
    }
    out.sort_unstable();
    out
}

/// Ego block `(x, y, v, cos h, sin h)` then `K` neighbour blocks
/// `(Δx, Δy, Δv, cos Δh, sin Δh, present)` in the ego frame, nearest first.
pub fn observe(ev: &VehicleState, nvs: &[VehicleState], k: usize, range: f64, v_max: f64, pos_scale: f64) -> Vec<f64> {
    let mut obs = Vec::with_capacity(5 + 6 * k);
    obs.extend([
        ev.position.x / pos_scale,
        ev.position.y / pos_scale,
        ev.speed / v_max,
        ev.heading.cos(),
        ev.heading.sin(),
    ]);
    let mut near: Vec<(f64, &VehicleState)> = nvs
        .iter()
        .map(|nv| (ev.position.distance(nv.position), nv))
        .filter(|(d, _)| *d <= range)
        .collect();
    near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
    for i in 0..k {
        match near.get(i) {
            Some((_, nv)) => {
                let rel = (nv.position - ev.position).to_frame(ev.heading);
                let dh = nv.heading - ev.heading;
                obs.extend([rel.x / range, rel.y / range, (nv.speed - ev.speed) / v_max, dh.cos(), dh.sin(), 1.0]);
            }
            None => obs.extend([0.0; 6]),
        }
    }
    for x in &mut obs {
        *x = x.clamp(-1.0, 1.0);
    }
    obs
}

/// Raw reward components of one policy step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTerms {
    pub collision: bool,
    pub speed: f64,
    pub lane_change: bool,
    /// Smallest EV-to-NV center distance, infinite without NVs.
    pub min_distance: f64,
    pub arrived: bool,
    pub slow_penalty: bool,
}

/// `w1·r_c + w2·r_s + w3·r_lc + w4·r_h + w5·r_a`; a collision step yields
/// exactly `w1`.
pub fn reward(t: &RewardTerms, w: &RewardWeights, v_max: f64, d_safe: f64) -> f64 {
    if t.collision {
        return w.w1;
    }
    let r_s = (t.speed / v_max).clamp(0.0, 1.0);
    let r_h = if t.min_distance >= d_safe { 1.0 } else { (t.min_distance / d_safe).max(0.0) };
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let slow = if t.slow_penalty { w.slow_penalty } else { 0.0 };
    w.w2 * r_s + w.w3 * flag(t.lane_change) + w.w4 * r_h + w.w5 * flag(t.arrived) - slow
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub collision: bool,
    pub arrived: bool,
    /// Collision or arrival.
    pub terminated: bool,
    /// Step limit reached without termination.
    pub truncated: bool,
    pub proposed: Action,
    pub executed: Action,
    pub mode: ExecMode,
    pub lane_change: bool,
    pub slow_penalty: bool,
    pub decision: Option<Decision>,
    pub planner_lane: RingLane,
    pub mpc_fallbacks: usize,
    pub speed: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// One JSONL trace line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub episode: u64,
    pub step: usize,
    pub time: f64,
    pub reward: f64,
    pub info: StepInfo,
    pub ev: VehicleState,
    pub hdvs: Vec<VehicleState>,
}

/// What the inspector sees before a decision.
#[derive(Clone, Debug, PartialEq)]
pub struct InspectorView {
    pub ev: VehicleState,
    pub target_lane: RingLane,
    pub leg: Option<usize>,
    pub preferred_lane: RingLane,
    pub nvs: Vec<VehicleState>,
}

impl InspectorView {
    pub fn intent(&self) -> EvIntent<'_> {
        EvIntent { state: &self.ev, target_lane: self.target_lane, leg: self.leg, preferred_lane: self.preferred_lane }
    }
}

pub struct Env {
    scenario: Scenario,
    pipeline: Pipeline,
    layout: RoundaboutLayout,
    graph: RoadGraph,
    rng: ChaCha8Rng,
    ev: EgoVehicle,
    hdvs: Vec<Hdv>,
    next_id: usize,
    next_arrival: Vec<f64>,
    time: f64,
    steps: usize,
    done: bool,
    episode: u64,
    controller: MpcController,
    slow_time: f64,
    slow_flagged: bool,
    trace: Option<Vec<TraceRecord>>,
}

impl Env {
    pub fn new(scenario: Scenario, pipeline: Pipeline) -> Result<Self> {
        scenario.validate()?;
        let layout = RoundaboutLayout::build(&scenario.layout)?;
        let graph = RoadGraph::build(&layout);
        let ev = EgoVehicle::on_leg(&layout, 0, 0.0, 0.0, 1, RingLane::Inner);
        let mut env = Env {
            rng: ChaCha8Rng::seed_from_u64(scenario.seed),
            controller: MpcController::new(scenario.mpc),
            next_arrival: vec![f64::INFINITY; layout.num_ports],
            scenario,
            pipeline,
            layout,
            graph,
            ev,
            hdvs: Vec::new(),
            next_id: 1,
            time: 0.0,
            steps: 0,
            done: false,
            episode: 0,
            slow_time: 0.0,
            slow_flagged: false,
            trace: None,
        };
        env.reset_episode(0)?;
        Ok(env)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn pipeline(&self) -> Pipeline {
        self.pipeline
    }

    pub fn layout(&self) -> &RoundaboutLayout {
        &self.layout
    }

    pub fn ev(&self) -> &EgoVehicle {
        &self.ev
    }

    pub fn hdvs(&self) -> &[Hdv] {
        &self.hdvs
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Start collecting one [`TraceRecord`] per step.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn write_trace<W: Write>(records: &[TraceRecord], mut w: W) -> Result<()> {
        for r in records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn reset(&mut self) -> Result<Vec<f64>> {
        self.reset_episode(0)
    }

    /// Deterministic reset: the random stream depends only on the scenario
    /// seed and `episode`.
    pub fn reset_episode(&mut self, episode: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.scenario.seed);
        rng.set_stream(episode);
        self.rng = rng;
        self.episode = episode;
        self.time = 0.0;
        self.steps = 0;
        self.done = false;
        self.next_id = 1;
        self.slow_time = 0.0;
        self.slow_flagged = false;
        self.controller.reset();
        if let Some(t) = self.trace.as_mut() {
            t.clear();
        }

        let n_ports = self.layout.num_ports;
        let port = self.rng.random_range(0..n_ports);
        let exit_port = (port + self.rng.random_range(1..n_ports)) % n_ports;
        let jit = self.scenario.spawn_jitter;
        let ev_speed = (self.scenario.ev_speed + self.uniform(jit.speed)).max(0.0);
        self.ev = EgoVehicle::on_leg(&self.layout, port, 5.0, ev_speed, exit_port, RingLane::Inner);

        self.hdvs = self.spawn_ring_hdvs(port)?;
        self.next_id = self.hdvs.len() + 1;
        let decision = initial_lane(&self.layout, port, exit_port, ev_speed, &self.hdv_states(), &self.scenario.planner);
        self.ev.target_lane = decision.lane;

        let rate = self.scenario.inflow_rate;
        self.next_arrival = (0..n_ports).map(|_| self.exponential(rate)).collect();
        Ok(self.observe())
    }

    /// Replace the traffic, e.g. to stage a scenario in tests.
    pub fn set_traffic(&mut self, ev: EgoVehicle, hdvs: Vec<Hdv>) {
        self.next_id = hdvs.iter().map(|h| h.state.id + 1).max().unwrap_or(1);
        self.ev = ev;
        self.hdvs = hdvs;
        self.next_arrival = vec![f64::INFINITY; self.layout.num_ports];
        self.done = false;
        self.steps = 0;
        self.controller.reset();
    }

    fn uniform(&mut self, half: f64) -> f64 {
        if half > 0.0 {
            self.rng.random_range(-half..=half)
        } else {
            0.0
        }
    }

    fn exponential(&mut self, rate: f64) -> f64 {
        if rate <= 0.0 {
            return f64::INFINITY;
        }
        let u: f64 = self.rng.random();
        self.time - (1.0 - u).ln() / rate
    }

    /// Ring HDVs at evenly spaced anchors behind the EV's merge point,
    /// alternating lanes, with arc-length and speed jitter.
    fn spawn_ring_hdvs(&mut self, ev_port: usize) -> Result<Vec<Hdv>> {
        let n = self.scenario.n_initial_hdvs;
        let jit = self.scenario.spawn_jitter;
        let base = self.layout.entry_angle(ev_port);
        for _ in 0..100 {
            let mut out: Vec<Hdv> = Vec::with_capacity(n);
            for i in 0..n {
                let lane = if i % 2 == 0 { RingLane::Inner } else { RingLane::Outer };
                let r = self.layout.lane_radius(lane);
                let angle = base + TAU * (i as f64 + 0.5) / n as f64 + self.uniform(jit.position) / r;
                let speed = (self.scenario.hdv_speed + self.uniform(jit.speed)).max(0.0);
                let exit = self.rng.random_range(0..self.layout.num_ports);
                out.push(Hdv::on_ring(&self.layout, i + 1, lane, angle, speed, exit));
            }
            let spaced = out.iter().enumerate().all(|(i, a)| {
                out[i + 1..].iter().all(|b| a.state.position.distance(b.state.position) >= 8.0)
                    && a.state.position.distance(self.ev.state.position) >= 8.0
            });
            if spaced {
                return Ok(out);
            }
        }
        Err(Error::Spawn(format!("no non-overlapping placement of {n} HDVs in 100 attempts")))
    }

    pub fn hdv_states(&self) -> Vec<VehicleState> {
        self.hdvs.iter().map(|h| h.state.clone()).collect()
    }

    /// HDVs the EV can sense; vehicles on outlet legs are hidden.
    pub fn visible_nvs(&self) -> Vec<VehicleState> {
        self.hdvs.iter().filter(|h| !matches!(h.phase, HdvPhase::Exit(_))).map(|h| h.state.clone()).collect()
    }

    pub fn observe(&self) -> Vec<f64> {
        let s = &self.scenario;
        observe(&self.ev.state, &self.visible_nvs(), s.k_neighbors, s.sensing_range, s.v_max, self.layout.leg_far_radius())
    }

    fn ev_ring_lanes(&self) -> [bool; 2] {
        let r = self.ev.state.position.norm();
        let b = self.layout.lane_boundary();
        let half = 0.5 * self.ev.state.width + 0.5;
        [r < b + half, r > b - half]
    }

    /// EV front bumper is clearly past the entry line (or it is already on the ring).
    pub fn ev_committed(&self) -> bool {
        self.ev.leg.is_none()
            || self.ev.state.position.norm() - 0.5 * self.ev.state.length < self.layout.outer_radius - COMMIT_MARGIN
    }

    fn ring_entries(&self) -> Vec<RingEntry> {
        let mut out: Vec<RingEntry> = self
            .hdvs
            .iter()
            .filter(|h| matches!(h.phase, HdvPhase::Ring(_)))
            .map(|h| RingEntry { id: h.state.id, angle: h.angle, speed: h.state.speed, lanes: h.ring_lanes() })
            .collect();
        if self.ev_committed() {
            let p = self.ev.state.position;
            out.push(RingEntry { id: self.ev.state.id, angle: p.angle(), speed: self.ev.state.speed, lanes: self.ev_ring_lanes() });
        }
        out
    }

    /// Some vehicle on the ring within the stretch upstream/downstream of the
    /// merge point of `port`.
    fn zone_occupied(&self, entries: &[RingEntry], port: usize, exclude: usize) -> bool {
        let merge = self.layout.entry_angle(port);
        let r = self.layout.lane_radius(RingLane::Outer);
        entries.iter().any(|e| {
            let d = wrap_angle(e.angle - merge) * r;
            e.id != exclude && d >= -self.scenario.conflict_upstream && d <= self.scenario.conflict_downstream
        })
    }

    /// Nearest vehicle ahead within range among those sharing a lane in `lanes`.
    fn ring_leader(&self, entries: &[RingEntry], id: usize, angle: f64, radius: f64, lanes: [bool; 2]) -> Option<(Leader, usize)> {
        let mut best: Option<(f64, usize, f64)> = None;
        for e in entries {
            if e.id == id || !((lanes[0] && e.lanes[0]) || (lanes[1] && e.lanes[1])) {
                continue;
            }
            let arc = RoundaboutLayout::ccw_delta(angle, e.angle) * radius;
            if arc > self.scenario.leader_range {
                continue;
            }
            if best.is_none_or(|(a, i, _)| arc < a || (arc == a && e.id < i)) {
                best = Some((arc, e.id, e.speed));
            }
        }
        best.map(|(arc, i, speed)| (Leader { speed, gap: arc - VEHICLE_LENGTH }, i))
    }

    /// Leader on entrance leg `port` ahead of leg coordinate `s`.
    fn leg_leader(&self, port: usize, s: f64, id: usize) -> Option<Leader> {
        let mut best: Option<(f64, f64)> = None;
        let mut consider = |other_s: f64, speed: f64| {
            if other_s > s && best.is_none_or(|(b, _)| other_s < b) {
                best = Some((other_s, speed));
            }
        };
        for h in &self.hdvs {
            if h.state.id != id && h.phase == HdvPhase::Approach(port) {
                consider(h.s, h.state.speed);
            }
        }
        if id != self.ev.state.id && self.ev.leg == Some(port) {
            consider(self.ev.state.lane_coord.s, self.ev.state.speed);
        }
        best.map(|(bs, speed)| Leader { speed, gap: bs - s - VEHICLE_LENGTH })
    }

    fn line_leader(&self, s: f64) -> Leader {
        Leader { speed: 0.0, gap: self.layout.entry_leg_length - (s + 0.5 * VEHICLE_LENGTH) }
    }

    fn closer(a: Option<Leader>, b: Option<Leader>) -> Option<Leader> {
        match (a, b) {
            (Some(x), Some(y)) => Some(if y.gap < x.gap { y } else { x }),
            (x, None) => x,
            (None, y) => y,
        }
    }

    /// Priority rules: entering HDVs hold at the line while their conflict
    /// zone is occupied; circulating HDVs follow their leader by IDM, and an
    /// inner HDV also matches the speed of a nearer vehicle ahead in the outer lane.
    pub fn apply_hdv_rules(&self) -> Vec<HdvCommand> {
        let entries = self.ring_entries();
        let idm = &self.scenario.idm;
        self.hdvs
            .iter()
            .map(|h| {
                let id = h.state.id;
                let v = h.state.speed;
                match h.phase {
                    HdvPhase::Approach(p) => {
                        let uncommitted = h.s + 0.5 * VEHICLE_LENGTH <= self.layout.entry_leg_length;
                        let hold = uncommitted && self.zone_occupied(&entries, p, id);
                        let mut leader = self.leg_leader(p, h.s, id);
                        if hold {
                            leader = Self::closer(leader, Some(self.line_leader(h.s)));
                        }
                        let accel = idm_acceleration(v, leader, idm);
                        HdvCommand { id, accel, hold, speed_target: hold.then_some(0.0) }
                    }
                    HdvPhase::Ring(lane) => {
                        let lanes = h.ring_lanes();
                        let own = self.ring_leader(&entries, id, h.angle, h.radius, lanes);
                        let mut accel = idm_acceleration(v, own.map(|l| l.0), idm);
                        let mut speed_target = None;
                        if lane == RingLane::Inner && h.changing.is_none() {
                            let any = self.ring_leader(&entries, id, h.angle, h.radius, [true, true]);
                            if let Some((l, _)) = any.filter(|(_, i)| own.is_none_or(|(_, o)| o != *i)) {
                                if l.gap + VEHICLE_LENGTH <= 50.0 {
                                    accel = accel.min(speed_match(v, l.speed, idm));
                                    speed_target = Some(l.speed);
                                }
                            }
                        }
                        HdvCommand { id, accel, hold: false, speed_target }
                    }
                    HdvPhase::Exit(p) => {
                        let leader = self
                            .hdvs
                            .iter()
                            .filter(|o| o.phase == HdvPhase::Exit(p) && o.s > h.s)
                            .map(|o| Leader { speed: o.state.speed, gap: o.s - h.s - VEHICLE_LENGTH })
                            .min_by(|a, b| a.gap.total_cmp(&b.gap));
                        HdvCommand { id, accel: idm_acceleration(v, leader, idm), hold: false, speed_target: None }
                    }
                }
            })
            .collect()
    }

    fn advance_hdvs(&mut self, cmds: &[HdvCommand], dt: f64) {
        let leg_len = self.layout.entry_leg_length;
        let r_out = self.layout.lane_radius(RingLane::Outer);
        let t_change = self.scenario.lane_change_time;
        for (h, cmd) in self.hdvs.iter_mut().zip(cmds) {
            let v = h.state.speed;
            let ds = (v * dt + 0.5 * cmd.accel * dt * dt).max(0.0);
            h.state.speed = (v + cmd.accel * dt).max(0.0);
            let mut radial_rate = 0.0;
            match h.phase {
                HdvPhase::Approach(p) => {
                    let stop_at = leg_len - 0.5 * VEHICLE_LENGTH;
                    h.s += ds;
                    if cmd.hold && h.s > stop_at {
                        h.s = stop_at;
                        h.state.speed = 0.0;
                    }
                    if h.s >= leg_len {
                        let over = (h.s - leg_len) / r_out;
                        let entry = self.layout.entry_angle(p);
                        h.phase = HdvPhase::Ring(RingLane::Outer);
                        h.radius = r_out;
                        h.angle = entry + over;
                        h.remaining = RoundaboutLayout::ccw_delta(entry, self.layout.exit_angle(h.exit_port)) - over;
                    }
                }
                HdvPhase::Ring(lane) => {
                    let dth = ds / h.radius;
                    h.angle += dth;
                    h.remaining -= dth;
                    if let Some((from, t)) = h.changing {
                        let t = t + dt;
                        let (r0, r1) = (self.layout.lane_radius(from), self.layout.lane_radius(lane));
                        if t >= t_change {
                            h.changing = None;
                            h.radius = r1;
                        } else {
                            h.changing = Some((from, t));
                            h.radius = r0 + (r1 - r0) * t / t_change;
                            radial_rate = (r1 - r0) / t_change;
                        }
                    }
                    if h.remaining <= 0.0 {
                        if lane == RingLane::Outer && h.changing.is_none() {
                            h.phase = HdvPhase::Exit(h.exit_port);
                            h.s = -h.remaining * h.radius;
                        } else {
                            h.remaining += TAU;
                        }
                    }
                }
                HdvPhase::Exit(_) => h.s += ds,
            }
            h.refresh(&self.layout, radial_rate);
        }
        let limit = 2.0 * leg_len;
        self.hdvs.retain(|h| !(matches!(h.phase, HdvPhase::Exit(_)) && h.s > limit));
    }

    /// Inner HDVs nearing their outlet move out once the outer-lane window
    /// beside them is clear.
    fn start_hdv_lane_changes(&mut self) {
        let entries = self.ring_entries();
        let r_out = self.layout.lane_radius(RingLane::Outer);
        let starts: Vec<usize> = self
            .hdvs
            .iter()
            .enumerate()
            .filter(|(_, h)| h.phase == HdvPhase::Ring(RingLane::Inner) && h.changing.is_none() && h.remaining < FRAC_PI_2)
            .filter(|(_, h)| {
                entries.iter().all(|e| {
                    let d = wrap_angle(e.angle - h.angle) * r_out;
                    e.id == h.state.id || !e.lanes[RingLane::Outer.index()] || !(-15.0..=12.0).contains(&d)
                })
            })
            .map(|(i, _)| i)
            .collect();
        for i in starts {
            let h = &mut self.hdvs[i];
            h.phase = HdvPhase::Ring(RingLane::Outer);
            h.changing = Some((RingLane::Inner, 0.0));
            h.refresh(&self.layout, 0.0);
        }
    }

    fn leg_clear(&self, port: usize) -> bool {
        let hdv_clear = self.hdvs.iter().all(|h| h.phase != HdvPhase::Approach(port) || h.s >= SPAWN_CLEARANCE);
        let ev_clear = self.ev.leg != Some(port) || self.ev.state.lane_coord.s >= SPAWN_CLEARANCE;
        hdv_clear && ev_clear
    }

    fn spawn_inflow(&mut self) {
        for p in 0..self.layout.num_ports {
            while self.next_arrival[p] <= self.time {
                if self.hdvs.len() < self.scenario.max_hdvs {
                    if !self.leg_clear(p) {
                        break;
                    }
                    let jit = self.scenario.spawn_jitter.speed;
                    let speed = (self.scenario.hdv_speed + self.uniform(jit)).max(0.0);
                    let n = self.layout.num_ports;
                    let exit = (p + self.rng.random_range(1..n)) % n;
                    self.hdvs.push(Hdv::on_approach(&self.layout, self.next_id, p, 0.0, speed, exit));
                    self.next_id += 1;
                }
                let rate = self.scenario.inflow_rate;
                self.next_arrival[p] += self.exponential(rate) - self.time;
            }
        }
    }

    /// Lane the planner recommends for the EV right now.
    pub fn planner_lane(&self) -> RingLane {
        let nvs = self.visible_nvs();
        match self.ev.leg {
            Some(port) => {
                initial_lane(&self.layout, port, self.ev.exit_port, self.ev.state.speed, &nvs, &self.scenario.planner).lane
            }
            None => route_lane(&self.graph, &self.layout, &self.ev.state, self.ev.exit_port, &nvs, &self.scenario.planner)
                .unwrap_or(self.ev.target_lane),
        }
    }

    pub fn inspector_view(&self) -> InspectorView {
        InspectorView {
            ev: self.ev.state.clone(),
            target_lane: self.ev.target_lane,
            leg: self.ev.leg,
            preferred_lane: self.planner_lane(),
            nvs: self.hdvs.iter().map(|h| h.state.clone()).collect(),
        }
    }

    /// The EV's IDM leader: the nearest vehicle ahead in its lane, plus the
    /// entry line while it must yield.
    fn ev_leader(&self, entries: &[RingEntry]) -> Option<Leader> {
        let id = self.ev.state.id;
        match self.ev.leg {
            Some(port) if !self.ev_committed() => {
                let s = self.ev.state.lane_coord.s;
                let mut l = self.leg_leader(port, s, id);
                if self.zone_occupied(entries, port, id) {
                    l = Self::closer(l, Some(self.line_leader(s)));
                }
                l
            }
            _ => {
                let p = self.ev.state.position;
                self.ring_leader(entries, id, p.angle(), p.norm(), self.ev_ring_lanes()).map(|l| l.0)
            }
        }
    }

    /// Vehicles near the EV for the MPC. Those ahead in the EV's lane (or on
    /// its leg) are hard constraints measured along the path; the entry line
    /// is a hard stop while the EV must yield.
    fn mpc_obstacles(&self, entries: &[RingEntry]) -> Vec<Obstacle> {
        let cfg = &self.scenario.mpc;
        let ev = &self.ev.state;
        let lanes = self.ev_ring_lanes();
        let target = self.ev.target_lane.index();
        let ev_angle = ev.position.angle();
        let ev_r = ev.position.norm();
        let mut out: Vec<Obstacle> = self
            .hdvs
            .iter()
            .filter(|h| h.state.position.distance(ev.position) <= 50.0)
            .map(|h| {
                let ahead = match (self.ev.leg, h.phase) {
                    (Some(p), HdvPhase::Approach(q)) if p == q && h.s > ev.lane_coord.s => Some(h.s - ev.lane_coord.s),
                    (None, HdvPhase::Ring(_)) => {
                        let hl = h.ring_lanes();
                        let shares = (0..2).any(|i| hl[i] && (lanes[i] || i == target));
                        let dth = RoundaboutLayout::ccw_delta(ev_angle, h.angle);
                        (shares && dth < FRAC_PI_2).then_some(dth * ev_r)
                    }
                    _ => None,
                };
                match ahead {
                    Some(gap) => {
                        let scale = if self.ev.leg.is_some() { 1.0 } else { ev_r / h.radius };
                        Obstacle::leader(h.state.position, gap, h.state.speed * scale, cfg)
                    }
                    None => {
                        let positions = predict_nv(&self.layout, &h.state, cfg.n_p, cfg.dt).poses.into_iter().map(|p| p.0).collect();
                        Obstacle { current: h.state.position, positions, along: None, hard: false }
                    }
                }
            })
            .collect();
        if let Some(port) = self.ev.leg {
            if !self.ev_committed() && self.zone_occupied(entries, port, ev.id) {
                let stop_s = self.layout.entry_leg_length - 0.5 * VEHICLE_LENGTH - COMMIT_MARGIN;
                let line = Vec2::from_polar(self.layout.outer_radius, self.layout.entry_angle(port));
                out.push(Obstacle::stop_at(line, stop_s - ev.lane_coord.s + self.scenario.d_safe, cfg));
            }
        }
        out
    }

    fn ev_control(&mut self, mode: ExecMode, dt: f64) -> (ControlInput, bool) {
        let entries = self.ring_entries();
        let bounds = self.scenario.mpc.bounds();
        let path = self.ev.path();
        let ev = self.ev.state.clone();
        if mode == ExecMode::IdmFollow {
            let leader = self.ev_leader(&entries);
            let accel = idm_acceleration(ev.speed, leader, &self.scenario.idm).clamp(bounds.a_min, bounds.a_max);
            let steer = track_steer(&self.layout, &ev, path, dt, &bounds);
            return (ControlInput { accel, steer }, false);
        }
        match self.pipeline.controller {
            Controller::Direct => {
                let accel = ((self.ev.v_target - ev.speed) / dt).clamp(bounds.a_min, bounds.a_max);
                let steer = track_steer(&self.layout, &ev, path, dt, &bounds);
                (ControlInput { accel, steer }, false)
            }
            Controller::Mpc => {
                let obstacles = self.mpc_obstacles(&entries);
                let (input, diag) = self.controller.track(&self.layout, &ev, path, self.ev.v_target, &obstacles, dt);
                (input, !diag.feasible)
            }
        }
    }

    fn advance_ev(&mut self, input: ControlInput, dt: f64) -> bool {
        self.ev.state = step_kinematics(&self.ev.state, input, dt, WHEELBASE);
        if self.ev.leg.is_some() && self.ev.state.position.norm() <= self.layout.outer_radius {
            self.ev.enter_ring(&self.layout);
        }
        self.ev.update_lane_coord(&self.layout);
        if self.ev.leg.is_some() {
            return false;
        }
        let a = self.ev.state.position.angle();
        self.ev.progress += wrap_angle(a - self.ev.last_angle);
        self.ev.last_angle = a;
        if self.ev.progress >= self.ev.goal {
            if self.ev.state.position.norm() >= self.layout.lane_boundary() {
                return true;
            }
            self.ev.goal += TAU;
        }
        false
    }

    fn ev_collided(&self) -> bool {
        let fp = self.ev.state.footprint();
        let reach = VEHICLE_LENGTH.hypot(self.ev.state.width);
        self.hdvs
            .iter()
            .any(|h| h.state.position.distance(self.ev.state.position) <= reach && fp.overlaps(&h.state.footprint()))
    }

    fn min_distance(&self) -> f64 {
        self.hdvs
            .iter()
            .map(|h| h.state.position.distance(self.ev.state.position))
            .fold(f64::INFINITY, f64::min)
    }

    /// Held HDVs are still behind the entry line.
    fn entry_rule_holds(&self, cmds: &[HdvCommand]) -> bool {
        cmds.iter().filter(|c| c.hold).all(|c| {
            self.hdvs.iter().filter(|h| h.state.id == c.id).all(|h| {
                matches!(h.phase, HdvPhase::Approach(_)) && h.s + 0.5 * VEHICLE_LENGTH <= self.layout.entry_leg_length + 1e-9
            })
        })
    }

    /// One policy period. Errors once the episode has ended.
    pub fn step(&mut self, proposed: Action) -> Result<Step> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let view = self.inspector_view();
        let (executed, mode, decision) = if self.pipeline.inspector {
            let cfg = InspectorConfig { d_safe: self.scenario.d_safe, v_max: self.scenario.v_max, ..self.scenario.inspector };
            let intent = view.intent();
            let list = priority_list(&self.layout, &intent, &view.nvs, &cfg).with_first(proposed);
            let d = execute(&self.layout, &list, &intent, &view.nvs, &cfg);
            (d.action, d.mode, Some(d))
        } else {
            let a = if feasible_actions(self.ev.target_lane).contains(&proposed) { proposed } else { Action::Idle };
            (a, ExecMode::Direct, None)
        };

        let (v_target, lane) = action_target(executed, self.ev.state.speed, self.ev.target_lane, self.scenario.v_max);
        let lane_change = lane != self.ev.target_lane && self.ev.leg.is_none();
        self.ev.v_target = v_target;
        self.ev.target_lane = lane;

        let dt = self.scenario.dt_sim;
        let mut collision = false;
        let mut arrived = false;
        let mut slow_penalty = false;
        let mut fallbacks = 0;
        for _ in 0..self.scenario.substeps() {
            let (input, fell_back) = self.ev_control(mode, dt);
            fallbacks += fell_back as usize;
            let cmds = self.apply_hdv_rules();
            arrived = self.advance_ev(input, dt);
            self.advance_hdvs(&cmds, dt);
            self.start_hdv_lane_changes();
            self.time += dt;
            self.spawn_inflow();
            debug_assert!(self.entry_rule_holds(&cmds), "entering HDV crossed the line into an occupied zone");

            if mode == ExecMode::IdmFollow && self.ev.state.speed < self.scenario.idm.v_e {
                self.slow_time += dt;
                if self.slow_time > self.scenario.slow_window && !self.slow_flagged {
                    self.slow_flagged = true;
                    slow_penalty = true;
                }
            } else {
                self.slow_time = 0.0;
                self.slow_flagged = false;
            }
            collision = self.ev_collided();
            if collision || arrived {
                break;
            }
        }
        if mode != ExecMode::IdmFollow {
            self.slow_time = 0.0;
            self.slow_flagged = false;
        }

        self.steps += 1;
        let terminated = collision || arrived;
        let truncated = !terminated && self.steps >= self.scenario.max_steps;
        self.done = terminated || truncated;
        let terms = RewardTerms {
            collision,
            speed: self.ev.state.speed,
            lane_change,
            min_distance: self.min_distance(),
            arrived,
            slow_penalty,
        };
        let r = reward(&terms, &self.scenario.reward, self.scenario.v_max, self.scenario.d_safe);
        let info = StepInfo {
            collision,
            arrived,
            terminated,
            truncated,
            proposed,
            executed,
            mode,
            lane_change,
            slow_penalty,
            decision,
            planner_lane: view.preferred_lane,
            mpc_fallbacks: fallbacks,
            speed: self.ev.state.speed,
        };
        if let Some(trace) = self.trace.as_mut() {
            let rec = TraceRecord {
                episode: self.episode,
                step: self.steps,
                time: self.time,
                reward: r,
                info: info.clone(),
                ev: self.ev.state.clone(),
                hdvs: self.hdvs.iter().map(|h| h.state.clone()).collect(),
            };
            trace.push(rec);
        }
        Ok(Step { observation: self.observe(), reward: r, done: self.done, info })
    }
}

/// Free-road acceleration toward `v_ref`, the speed of a vehicle to match.
fn speed_match(v: f64, v_ref: f64, idm: &IdmParams) -> f64 {
    (idm.a_max * (1.0 - (v / v_ref.max(0.1)).powi(4))).clamp(-idm.brake_limit, idm.a_max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(mode: Mode, seed: u64) -> Env {
        Env::new(Scenario::new(mode, seed), Pipeline::default()).unwrap()
    }

    fn state(id: usize, x: f64, y: f64, speed: f64, heading: f64) -> VehicleState {
        VehicleState::new(id, Role::Hdv, Vec2::new(x, y), speed, heading, LaneCoord::new(Lane::EntryLeg(0), 0.0))
    }

    #[test]
    fn reset_is_deterministic() {
        let (mut a, mut b) = (env(Mode::Normal, 7), env(Mode::Normal, 7));
        assert_eq!(a.reset_episode(3).unwrap(), b.reset_episode(3).unwrap());
        assert_eq!(a.hdvs(), b.hdvs());
        assert_eq!(a.ev(), b.ev());
        for i in 0..20 {
            if a.is_done() {
                break;
            }
            let act = Action::ALL[i % Action::COUNT];
            let (sa, sb) = (a.step(act).unwrap(), b.step(act).unwrap());
            assert_eq!(sa.observation, sb.observation);
            assert_eq!(sa.reward.to_bits(), sb.reward.to_bits());
        }
    }

    #[test]
    fn mode_sets_initial_hdvs() {
        assert_eq!(env(Mode::Normal, 1).hdvs().len(), 6);
        assert_eq!(env(Mode::Hard, 1).hdvs().len(), 10);
    }

    #[test]
    fn zero_jitter_puts_hdvs_on_anchors() {
        let mut sc = Scenario::new(Mode::Normal, 4);
        sc.spawn_jitter = SpawnJitter { position: 0.0, speed: 0.0 };
        let e = Env::new(sc.clone(), Pipeline::default()).unwrap();
        let base = e.layout().entry_angle(e.ev().entry_port);
        for (i, h) in e.hdvs().iter().enumerate() {
            let want = (base + TAU * (i as f64 + 0.5) / 6.0).rem_euclid(TAU);
            assert!(wrap_angle(h.angle - want).abs() < 1e-12);
            assert_eq!(h.state.speed, sc.hdv_speed);
        }
        assert_eq!(e.ev().state.speed, sc.ev_speed);
    }

    #[test]
    fn entering_hdv_holds_for_occupied_zone() {
        let mut e = env(Mode::Normal, 0);
        let layout = e.layout().clone();
        let ev = EgoVehicle::on_leg(&layout, 2, 5.0, 0.0, 3, RingLane::Outer);
        let at_line = layout.entry_leg_length - 0.5 * VEHICLE_LENGTH - 0.5;
        let r = layout.lane_radius(RingLane::Outer);
        let waiting = Hdv::on_approach(&layout, 1, 0, at_line, 5.0, 1);
        let circulating = Hdv::on_ring(&layout, 2, RingLane::Outer, layout.entry_angle(0) - 10.0 / r, 10.0, 3);
        e.set_traffic(ev.clone(), vec![waiting.clone(), circulating]);
        let cmd = e.apply_hdv_rules()[0];
        assert!(cmd.hold);
        assert_eq!(cmd.speed_target, Some(0.0));
        assert!(cmd.accel < 0.0);

        e.set_traffic(ev, vec![waiting]);
        assert!(!e.apply_hdv_rules()[0].hold);
    }

    #[test]
    fn lone_hdv_accelerates_freely() {
        let mut e = env(Mode::Normal, 0);
        let layout = e.layout().clone();
        let ev = EgoVehicle::on_leg(&layout, 2, 5.0, 0.0, 3, RingLane::Outer);
        e.set_traffic(ev, vec![Hdv::on_ring(&layout, 1, RingLane::Inner, 0.3, 6.0, 1)]);
        let cmd = e.apply_hdv_rules()[0];
        let idm = &e.scenario().idm;
        assert_eq!(cmd.accel, idm_acceleration(6.0, None, idm));
        assert!(cmd.accel > 0.0);
        assert_eq!(cmd.speed_target, None);
    }

    #[test]
    fn inner_hdv_matches_outer_leader() {
        let mut e = env(Mode::Normal, 0);
        let layout = e.layout().clone();
        let ev = EgoVehicle::on_leg(&layout, 2, 5.0, 0.0, 3, RingLane::Outer);
        let phi = 1.0;
        let r = layout.lane_radius(RingLane::Outer);
        let inner = Hdv::on_ring(&layout, 1, RingLane::Inner, phi, 12.0, 0);
        let outer = Hdv::on_ring(&layout, 2, RingLane::Outer, phi + 10.0 / r, 7.0, 0);
        e.set_traffic(ev, vec![inner, outer]);
        let cmd = e.apply_hdv_rules()[0];
        assert_eq!(cmd.speed_target, Some(7.0));
        assert!(cmd.accel < 0.0);
    }

    #[test]
    fn observation_examples() {
        let ev = VehicleState { role: Role::Ev, ..state(0, 0.0, 0.0, 10.0, 0.0) };
        let empty = observe(&ev, &[], 5, 60.0, 25.0, 100.0);
        assert_eq!(empty.len(), 35);
        assert_eq!(&empty[..5], &[0.0, 0.0, 0.4, 1.0, 0.0]);
        assert!(empty[5..].iter().all(|&x| x == 0.0));

        let ahead = observe(&ev, &[state(1, 30.0, 0.0, 10.0, 0.0)], 5, 60.0, 25.0, 100.0);
        assert_eq!(&ahead[5..11], &[0.5, 0.0, 0.0, 1.0, 0.0, 1.0]);

        let many: Vec<_> = (0..7).map(|i| state(i + 1, 10.0 + 5.0 * i as f64, 0.0, 10.0, 0.0)).collect();
        let obs = observe(&ev, &many, 5, 60.0, 25.0, 100.0);
        let xs: Vec<f64> = (0..5).map(|i| obs[5 + 6 * i] * 60.0).collect();
        for (x, want) in xs.iter().zip([10.0, 15.0, 20.0, 25.0, 30.0]) {
            assert!((x - want).abs() < 1e-9);
        }
    }

    #[test]
    fn reward_examples() {
        let w = RewardWeights::default();
        let base = RewardTerms {
            collision: false,
            speed: 25.0,
            lane_change: false,
            min_distance: 20.0,
            arrived: false,
            slow_penalty: false,
        };
        let crash = RewardTerms { collision: true, speed: 0.0, min_distance: 0.0, ..base };
        assert_eq!(reward(&crash, &w, 25.0, 10.0), -10.0);
        assert!((reward(&base, &w, 25.0, 10.0) - 0.5).abs() < 1e-12);
        assert!((reward(&RewardTerms { arrived: true, ..base }, &w, 25.0, 10.0) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn collision_examples() {
        let a = state(1, 0.0, 0.0, 0.0, 0.0);
        assert!(detect_collisions(&[a.clone(), state(2, 10.0, 0.0, 0.0, 0.0)]).is_empty());
        assert_eq!(detect_collisions(&[a.clone(), state(2, 0.0, 0.0, 0.0, 0.0)]), vec![(1, 2)]);
        assert_eq!(detect_collisions(&[a, state(2, 3.0, 0.0, 0.0, FRAC_PI_2)]), vec![(1, 2)]);
    }

    #[test]
    fn step_after_done_errors() {
        let mut e = env(Mode::Normal, 2);
        while !e.step(Action::Idle).unwrap().done {}
        assert!(matches!(e.step(Action::Idle), Err(Error::EpisodeDone)));
        e.reset().unwrap();
        assert!(e.step(Action::Idle).is_ok());
    }

    #[test]
    fn idle_on_empty_ring_holds_speed() {
        let mut e = env(Mode::Normal, 0);
        let layout = e.layout().clone();
        e.set_traffic(EgoVehicle::on_ring(&layout, RingLane::Outer, 0.2, 12.0, 0), Vec::new());
        let step = e.step(Action::Idle).unwrap();
        assert_eq!(step.info.executed, Action::Idle);
        assert!((e.ev().state.speed - 12.0).abs() <= 0.5);
    }

    #[test]
    fn crash_ends_the_episode() {
        let mut e = env(Mode::Normal, 0);
        let layout = e.layout().clone();
        let ev = EgoVehicle::on_ring(&layout, RingLane::Outer, 0.2, 15.0, 0);
        let r = layout.lane_radius(RingLane::Outer);
        let blocker = Hdv::on_ring(&layout, 1, RingLane::Outer, 0.2 + 4.8 / r, 0.0, 0);
        e.set_traffic(ev, vec![blocker]);
        let step = e.step(Action::Faster).unwrap();
        assert!(step.done && step.info.collision && step.info.terminated);
        assert_eq!(step.reward, -10.0);
    }

    #[test]
    fn reaching_the_outlet_ends_the_episode() {
        let mut e = env(Mode::Normal, 0);
        let layout = e.layout().clone();
        let exit = layout.exit_angle(1);
        e.set_traffic(EgoVehicle::on_ring(&layout, RingLane::Outer, exit - 0.05, 10.0, 1), Vec::new());
        let step = e.step(Action::Idle).unwrap();
        assert!(step.done && step.info.arrived && !step.info.collision);
    }
}
