//! Receding-horizon speed control by projected-gradient shooting, with a PID
//! fallback when no admissible plan is found. Steering comes from the lane
//! tracker; only the acceleration sequence is optimised.

use serde::{Deserialize, Serialize};

use crate::dynamics::{lookahead_point, track_steer, ControlBounds, ControlInput, PathTarget, VehicleState};
use crate::geom::Vec2;
use crate::world::RoundaboutLayout;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub integral_limit: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self { kp: 1.2, ki: 0.1, kd: 0.05, integral_limit: 10.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub n_p: usize,
    pub n_c: usize,
    /// Step of the prediction model.
    pub dt: f64,
    pub lambda: f64,
    pub d_safe: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub steer_min: f64,
    pub steer_max: f64,
    pub iterations: usize,
    pub fd_step: f64,
    pub tolerance: f64,
    /// Penalty weight enforcing the hard distance constraint inside the solver.
    pub hard_weight: f64,
    /// The penalty pushes this far past a hard limit so that its small
    /// residual still satisfies the limit itself.
    pub hard_margin: f64,
    /// Use the literal two-sided gap term instead of the one-sided hinge.
    pub symmetric_gap: bool,
    pub pid: PidGains,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            n_p: 10,
            n_c: 5,
            dt: 0.4,
            lambda: 0.01,
            d_safe: 10.0,
            v_min: 0.0,
            v_max: 25.0,
            a_min: -5.0,
            a_max: 3.0,
            steer_min: -0.6,
            steer_max: 0.6,
            iterations: 40,
            fd_step: 1e-3,
            tolerance: 1e-3,
            hard_weight: 1e4,
            hard_margin: 0.1,
            symmetric_gap: false,
            pid: PidGains::default(),
        }
    }
}

impl MpcConfig {
    pub fn bounds(&self) -> ControlBounds {
        ControlBounds { a_min: self.a_min, a_max: self.a_max, steer_min: self.steer_min, steer_max: self.steer_max }
    }
}

/// Distance to something measured along the EV's own path.
#[derive(Clone, Debug, PartialEq)]
pub struct Along {
    pub now: f64,
    /// Path coordinate of the obstacle at steps `1..=N_p`, relative to the EV's
    /// current position.
    pub ahead: Vec<f64>,
}

/// Something to keep clear of, predicted at steps `1..=N_p`.
#[derive(Clone, Debug, PartialEq)]
pub struct Obstacle {
    pub current: Vec2,
    pub positions: Vec<Vec2>,
    /// When set, separation is the signed gap along the path instead of the
    /// Euclidean distance, so driving through the obstacle is never admissible.
    pub along: Option<Along>,
    /// Separation may not drop below `min(D_safe, current separation)`.
    pub hard: bool,
}

impl Obstacle {
    /// Vehicle ahead on the path moving at constant `speed`.
    pub fn leader(current: Vec2, gap: f64, speed: f64, cfg: &MpcConfig) -> Self {
        let ahead: Vec<f64> = (1..=cfg.n_p).map(|k| gap + speed * cfg.dt * k as f64).collect();
        Obstacle { current, positions: vec![current; cfg.n_p], along: Some(Along { now: gap, ahead }), hard: true }
    }

    /// Fixed point `gap` metres down the path.
    pub fn stop_at(current: Vec2, gap: f64, cfg: &MpcConfig) -> Self {
        Self::leader(current, gap, 0.0, cfg)
    }

    fn separation(&self, k: usize, s: f64, p: Vec2) -> f64 {
        match &self.along {
            Some(a) => a.ahead[k] - s,
            None => p.distance(self.positions[k]),
        }
    }
}

/// Where the EV will be after driving `s` metres along its tracked path.
pub trait PathModel {
    fn point(&self, s: f64) -> Vec2;
}

/// The tracked lane centerline; a lateral offset from a ring lane decays
/// linearly over the first 15 m.
pub struct LanePath<'a> {
    pub layout: &'a RoundaboutLayout,
    pub start: Vec2,
    pub target: PathTarget,
}

const OFFSET_DECAY: f64 = 15.0;

impl PathModel for LanePath<'_> {
    fn point(&self, s: f64) -> Vec2 {
        match self.target {
            PathTarget::Ring(lane) => {
                let r = self.layout.lane_radius(lane);
                let off = (self.start.norm() - r) * (1.0 - s / OFFSET_DECAY).max(0.0);
                Vec2::from_polar(r + off, self.start.angle() + s / r)
            }
            PathTarget::Leg { .. } => lookahead_point(self.layout, self.start, self.target, s),
        }
    }
}

/// Straight line along a heading; handy for tests.
pub struct StraightPath {
    pub start: Vec2,
    pub heading: f64,
}

impl PathModel for StraightPath {
    fn point(&self, s: f64) -> Vec2 {
        self.start + Vec2::unit(self.heading) * s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPlan {
    pub u: Vec<f64>,
    pub steer: Vec<f64>,
    pub cost: f64,
    pub feasible: bool,
    pub iterations: usize,
}

/// Speeds and path positions after each model step under piecewise-constant
/// acceleration; a vehicle that reaches standstill inside a step stays there.
pub fn rollout(u: &[f64], v0: f64, cfg: &MpcConfig) -> Vec<(f64, f64)> {
    let mut v = v0;
    let mut s = 0.0;
    (0..cfg.n_p)
        .map(|k| {
            let a = u[k.min(u.len() - 1)];
            let next = v + a * cfg.dt;
            if next >= 0.0 {
                s += 0.5 * (v + next) * cfg.dt;
                v = next;
            } else {
                s += v * v / (-2.0 * a);
                v = 0.0;
            }
            (v, s)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostBreakdown {
    pub cost: f64,
    /// Largest violation of a speed bound or hard distance constraint.
    pub violation: f64,
}

/// `Σ (v(k) − v*)² + Σ gap terms + λ·Σ u(k)²`, plus the penalty that enforces
/// the hard constraints.
pub fn plan_cost(u: &[f64], v0: f64, path: &dyn PathModel, obstacles: &[Obstacle], v_target: f64, cfg: &MpcConfig) -> CostBreakdown {
    let start = path.point(0.0);
    let euclid = obstacles.iter().any(|o| o.along.is_none());
    let limits: Vec<f64> = obstacles
        .iter()
        .map(|o| match (&o.along, o.hard) {
            (_, false) => f64::NEG_INFINITY,
            (Some(a), true) => cfg.d_safe.min(a.now),
            (None, true) => cfg.d_safe.min(start.distance(o.current)),
        })
        .collect();
    let mut cost = cfg.lambda * u.iter().map(|a| a * a).sum::<f64>();
    let mut violation = 0.0f64;
    for (k, (v, s)) in rollout(u, v0, cfg).into_iter().enumerate() {
        cost += (v - v_target).powi(2);
        violation = violation.max(v - cfg.v_max).max(cfg.v_min - v);
        if obstacles.is_empty() {
            continue;
        }
        let p = if euclid { path.point(s) } else { start };
        for (o, &limit) in obstacles.iter().zip(&limits) {
            let d = o.separation(k, s, p);
            if cfg.symmetric_gap || d < cfg.d_safe {
                cost += (d - cfg.d_safe).powi(2);
            }
            violation = violation.max(limit - d);
            let short = limit + cfg.hard_margin - d;
            if short > 0.0 {
                cost += cfg.hard_weight * short * short;
            }
        }
    }
    CostBreakdown { cost, violation }
}

/// Inputs of one MPC solve.
pub struct MpcProblem<'a> {
    pub v0: f64,
    pub v_target: f64,
    pub path: &'a dyn PathModel,
    pub obstacles: &'a [Obstacle],
    pub steer: f64,
}

fn descend(problem: &MpcProblem, mut u: Vec<f64>, cfg: &MpcConfig) -> (Vec<f64>, CostBreakdown, usize) {
    let eval = |u: &[f64]| plan_cost(u, problem.v0, problem.path, problem.obstacles, problem.v_target, cfg);
    let mut best = eval(&u);
    let mut step = 0.05;
    let mut iters = 0;
    let mut grad = vec![0.0; u.len()];
    for _ in 0..cfg.iterations {
        iters += 1;
        for i in 0..u.len() {
            let mut probe = u.clone();
            probe[i] += cfg.fd_step;
            grad[i] = (eval(&probe).cost - best.cost) / cfg.fd_step;
        }
        let mut improved = false;
        while step > 1e-6 {
            let cand: Vec<f64> = u
                .iter()
                .zip(&grad)
                .map(|(a, g)| (a - step * g).clamp(cfg.a_min, cfg.a_max))
                .collect();
            let c = eval(&cand);
            if c.cost < best.cost {
                let gain = best.cost - c.cost;
                u = cand;
                best = c;
                step *= 1.5;
                improved = gain >= cfg.tolerance;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (u, best, iters)
}

/// Projected-gradient shooting from a zero-control start.
pub fn solve(problem: &MpcProblem, cfg: &MpcConfig) -> ControlPlan {
    solve_warm(problem, None, cfg)
}

/// Like [`solve`], additionally starting from `previous` shifted by one step;
/// the cheaper of the two results is returned.
pub fn solve_warm(problem: &MpcProblem, previous: Option<&[f64]>, cfg: &MpcConfig) -> ControlPlan {
    let (mut u, mut c, mut iters) = descend(problem, vec![0.0; cfg.n_c], cfg);
    if let Some(prev) = previous.filter(|p| p.len() == cfg.n_c) {
        let mut shifted = prev[1..].to_vec();
        shifted.push(*prev.last().unwrap());
        let (u2, c2, i2) = descend(problem, shifted, cfg);
        iters += i2;
        if c2.cost < c.cost {
            u = u2;
            c = c2;
        }
    }
    ControlPlan {
        steer: vec![problem.steer; cfg.n_c],
        u,
        cost: c.cost,
        feasible: c.violation <= 1e-6,
        iterations: iters,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: Option<f64>,
}

/// PID on the speed error, clamped to the acceleration bounds.
pub fn pid_fallback(v: f64, v_target: f64, gains: &PidGains, state: &mut PidState, dt: f64, a_min: f64, a_max: f64) -> f64 {
    let e = v_target - v;
    state.integral = (state.integral + e * dt).clamp(-gains.integral_limit, gains.integral_limit);
    let de = state.prev_error.map_or(0.0, |p| (e - p) / dt);
    state.prev_error = Some(e);
    (gains.kp * e + gains.ki * state.integral + gains.kd * de).clamp(a_min, a_max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackDiagnostics {
    pub feasible: bool,
    pub cost: f64,
    pub iterations: usize,
    pub fallback_target: Option<f64>,
}

/// MPC speed control plus lane-tracker steering for one vehicle.
#[derive(Clone, Debug, Default)]
pub struct MpcController {
    pub cfg: MpcConfig,
    pub pid: PidState,
    previous: Option<Vec<f64>>,
}

impl MpcController {
    pub fn new(cfg: MpcConfig) -> Self {
        Self { cfg, pid: PidState::default(), previous: None }
    }

    pub fn reset(&mut self) {
        self.pid = PidState::default();
        self.previous = None;
    }

    /// Control for the next simulation step of length `dt`. When the solver
    /// finds no admissible plan the PID fallback takes over, aiming for a
    /// stop if a hard distance constraint is at stake.
    pub fn track(
        &mut self,
        layout: &RoundaboutLayout,
        ev: &VehicleState,
        target: PathTarget,
        v_target: f64,
        obstacles: &[Obstacle],
        dt: f64,
    ) -> (ControlInput, TrackDiagnostics) {
        let bounds = self.cfg.bounds();
        let steer = track_steer(layout, ev, target, dt, &bounds);
        let path = LanePath { layout, start: ev.position, target };
        let problem = MpcProblem { v0: ev.speed, v_target, path: &path, obstacles, steer };
        let plan = solve_warm(&problem, self.previous.as_deref(), &self.cfg);
        if plan.feasible {
            self.previous = Some(plan.u.clone());
            self.pid = PidState::default();
            let input = bounds.clamp(ControlInput { accel: plan.u[0], steer });
            return (input, TrackDiagnostics { feasible: true, cost: plan.cost, iterations: plan.iterations, fallback_target: None });
        }
        self.previous = None;
        let fallback_target = if obstacles.iter().any(|o| o.hard) { 0.0 } else { v_target };
        let accel = pid_fallback(ev.speed, fallback_target, &self.cfg.pid, &mut self.pid, dt, self.cfg.a_min, self.cfg.a_max);
        let diag = TrackDiagnostics { feasible: false, cost: plan.cost, iterations: plan.iterations, fallback_target: Some(fallback_target) };
        (ControlInput { accel, steer }, diag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line() -> StraightPath {
        StraightPath { start: Vec2::ZERO, heading: 0.0 }
    }

    #[test]
    fn cost_examples() {
        let cfg = MpcConfig::default();
        let zero = vec![0.0; cfg.n_c];
        assert_eq!(plan_cost(&zero, 10.0, &line(), &[], 10.0, &cfg).cost, 0.0);
        assert_eq!(plan_cost(&zero, 11.0, &line(), &[], 10.0, &cfg).cost, 10.0);
    }

    #[test]
    fn accel_term_with_rollout() {
        let cfg = MpcConfig { lambda: 1.0, ..Default::default() };
        let u = [1.0, 0.0, 0.0, 0.0, 0.0];
        // one step at +1 m/s² lifts every later speed by dt
        let expected = 1.0 + cfg.n_p as f64 * cfg.dt * cfg.dt;
        let got = plan_cost(&u, 10.0, &line(), &[], 10.0, &cfg).cost;
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn rollout_displacement_is_exact() {
        let cfg = MpcConfig::default();
        let r = rollout(&[2.0; 5], 4.0, &cfg);
        let t = cfg.dt * 3.0;
        assert!((r[2].1 - (4.0 * t + t * t)).abs() < 1e-12);
        // 4 m/s braking at 5 m/s² stops after 1.6 m and stays there
        let stop = rollout(&[-5.0; 5], 4.0, &cfg);
        assert!(stop[2..].iter().all(|&(v, s)| v == 0.0 && (s - 1.6).abs() < 1e-12));
    }

    #[test]
    fn held_control_beyond_n_c() {
        let cfg = MpcConfig::default();
        let r = rollout(&[0.0, 0.0, 0.0, 0.0, 1.0], 5.0, &cfg);
        assert!((r[9].0 - (5.0 + 6.0 * cfg.dt)).abs() < 1e-12);
    }

    #[test]
    fn free_road_solutions() {
        let cfg = MpcConfig::default();
        let path = line();
        let hold = solve(&MpcProblem { v0: 12.0, v_target: 12.0, path: &path, obstacles: &[], steer: 0.0 }, &cfg);
        assert!(hold.u[0].abs() <= 0.05 && hold.feasible);
        let up = solve(&MpcProblem { v0: 9.0, v_target: 12.0, path: &path, obstacles: &[], steer: 0.0 }, &cfg);
        assert!(up.u[0] > 0.0);
        assert!(up.u.iter().all(|a| (cfg.a_min..=cfg.a_max).contains(a)));
    }

    #[test]
    fn pid_cases() {
        let g = PidGains::default();
        let mut st = PidState::default();
        assert_eq!(pid_fallback(5.0, 5.0, &g, &mut st, 0.1, -5.0, 3.0), 0.0);
        let p = PidGains { kp: 1.0, ki: 0.0, kd: 0.0, integral_limit: 10.0 };
        assert_eq!(pid_fallback(3.0, 5.0, &p, &mut PidState::default(), 0.1, -5.0, 3.0), 2.0);
        assert_eq!(pid_fallback(0.0, 10.0, &p, &mut PidState::default(), 0.1, -5.0, 3.0), 3.0);
        let mut wind = PidState::default();
        for _ in 0..1000 {
            pid_fallback(0.0, 25.0, &g, &mut wind, 0.1, -5.0, 3.0);
        }
        assert_eq!(wind.integral, g.integral_limit);
    }
}
