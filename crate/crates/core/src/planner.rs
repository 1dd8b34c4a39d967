//! Route planning: time-to-collision, initial lane selection at an entrance,
//! uniform-cost search over the road graph and in-ring lane choice.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::dynamics::VehicleState;
use crate::error::{Error, Result};
use crate::world::{EdgeId, EdgeKind, NodeId, RingLane, RoadGraph, RoundaboutLayout};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerWeights {
    pub w1_ttc: f64,
    pub w2_tdt: f64,
    pub w1_dist: f64,
    pub w2_dens: f64,
    pub d_safe: f64,
    /// Smallest TTC to a lone outer-lane HDV that still allows merging.
    pub min_merge_ttc: f64,
}

impl Default for PlannerWeights {
    fn default() -> Self {
        Self {
            w1_ttc: 0.7,
            w2_tdt: 0.3,
            w1_dist: 1.0,
            w2_dens: 50.0,
            d_safe: 10.0,
            min_merge_ttc: 2.0,
        }
    }
}

/// Gap over closing speed; `f64::INFINITY` when the gap is not closing.
pub fn ttc(gap: f64, v_ev: f64, v_nv: f64) -> f64 {
    let closing = v_ev - v_nv;
    if closing <= 0.0 {
        f64::INFINITY
    } else {
        gap.max(0.0) / closing
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneDecision {
    pub lane: RingLane,
    /// Hold at the entry line before merging.
    pub wait: bool,
}

/// Minimum HDV speed used for driving-time estimates.
pub const TDT_MIN_SPEED: f64 = 0.5;

fn ring_angle(layout: &RoundaboutLayout, v: &VehicleState) -> Option<(RingLane, f64)> {
    let lane = v.lane_coord.lane.ring()?;
    Some((lane, v.lane_coord.s / layout.lane_radius(lane)))
}

/// Lane for an EV about to enter at `port` heading for `exit_port`.
///
/// No ring traffic gives Inner. With at most two ring HDVs the lane with the
/// larger TTC to its nearest downstream HDV wins (Inner on ties), and a lone
/// outer-lane HDV sends the EV to Inner, waiting if its TTC is short. With
/// more HDVs each lane is scored `w1·(1/TTC) + w2·TDT/max TDT` and the lower
/// score wins.
pub fn initial_lane(
    layout: &RoundaboutLayout,
    port: usize,
    exit_port: usize,
    ev_speed: f64,
    hdvs: &[VehicleState],
    weights: &PlannerWeights,
) -> LaneDecision {
    let merge = layout.entry_angle(port);
    let outlet = layout.exit_angle(exit_port);
    let mut nearest: [Option<(f64, f64)>; 2] = [None, None];
    let mut tdt = [0.0f64; 2];
    let mut count = [0usize; 2];
    for v in hdvs {
        let Some((lane, angle)) = ring_angle(layout, v) else { continue };
        let r = layout.lane_radius(lane);
        let i = lane.index();
        count[i] += 1;
        let gap = RoundaboutLayout::ccw_delta(merge, angle) * r;
        if nearest[i].is_none_or(|(g, _)| gap < g) {
            nearest[i] = Some((gap, v.speed));
        }
        tdt[i] += RoundaboutLayout::ccw_delta(angle, outlet) * r / v.speed.max(TDT_MIN_SPEED);
    }
    let lane_ttc = |i: usize| nearest[i].map_or(f64::INFINITY, |(g, s)| ttc(g, ev_speed, s));
    let total = count[0] + count[1];
    let pick = |inner_better_or_equal: bool| if inner_better_or_equal { RingLane::Inner } else { RingLane::Outer };

    if total == 0 {
        return LaneDecision { lane: RingLane::Inner, wait: false };
    }
    if total > 2 {
        let max_tdt = tdt[0].max(tdt[1]);
        let score = |i: usize| {
            let norm = if max_tdt > 0.0 { tdt[i] / max_tdt } else { 0.0 };
            weights.w1_ttc * (1.0 / lane_ttc(i)) + weights.w2_tdt * norm
        };
        return LaneDecision { lane: pick(score(0) <= score(1)), wait: false };
    }
    if count[0] == 0 {
        let t = lane_ttc(1);
        return LaneDecision { lane: RingLane::Inner, wait: t < weights.min_merge_ttc };
    }
    LaneDecision { lane: pick(lane_ttc(0) >= lane_ttc(1)), wait: false }
}

/// Vehicles per metre on `edge`.
pub fn edge_density(graph: &RoadGraph, layout: &RoundaboutLayout, edge: EdgeId, vehicles: &[VehicleState]) -> f64 {
    let n = vehicles
        .iter()
        .filter(|v| graph.edge_at(layout, v.lane_coord) == Some(edge))
        .count();
    n as f64 / graph.edges[edge].length
}

#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    pub nodes: Vec<NodeId>,
    pub cost: f64,
}

/// `C(e) = w1·D(e) + w2·density(e)` for every edge, indexed by edge id.
pub fn edge_costs(graph: &RoadGraph, layout: &RoundaboutLayout, vehicles: &[VehicleState], weights: &PlannerWeights) -> Vec<f64> {
    let mut counts = vec![0usize; graph.edges.len()];
    for v in vehicles {
        if let Some(e) = graph.edge_at(layout, v.lane_coord) {
            counts[e] += 1;
        }
    }
    graph
        .edges
        .iter()
        .map(|e| weights.w1_dist * e.length + weights.w2_dens * counts[e.id] as f64 / e.length)
        .collect()
}

#[derive(PartialEq)]
struct Frontier {
    cost: f64,
    path: Vec<NodeId>,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (cost, path)
        other.cost.total_cmp(&self.cost).then_with(|| other.path.cmp(&self.path))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Uniform-cost search with precomputed edge costs. Among equal-cost paths the
/// lexicographically smallest node sequence is returned.
pub fn shortest_path_with_costs(graph: &RoadGraph, costs: &[f64], start: NodeId, goal: NodeId) -> Result<Path> {
    for n in [start, goal] {
        if n >= graph.nodes.len() {
            return Err(Error::UnknownNode(n));
        }
    }
    let mut settled = vec![false; graph.nodes.len()];
    let mut heap = BinaryHeap::new();
    heap.push(Frontier { cost: 0.0, path: vec![start] });
    while let Some(Frontier { cost, path }) = heap.pop() {
        let node = *path.last().unwrap();
        if settled[node] {
            continue;
        }
        settled[node] = true;
        if node == goal {
            return Ok(Path { nodes: path, cost });
        }
        for e in graph.outgoing(node) {
            if !settled[e.to] {
                let mut next = path.clone();
                next.push(e.to);
                heap.push(Frontier { cost: cost + costs[e.id], path: next });
            }
        }
    }
    Err(Error::Unreachable { start, goal })
}

pub fn shortest_path(
    graph: &RoadGraph,
    layout: &RoundaboutLayout,
    start: NodeId,
    goal: NodeId,
    vehicles: &[VehicleState],
    weights: &PlannerWeights,
) -> Result<Path> {
    shortest_path_with_costs(graph, &edge_costs(graph, layout, vehicles, weights), start, goal)
}

/// Port of the ring node a ring vehicle reaches next, with its lane.
pub fn next_node(layout: &RoundaboutLayout, v: &VehicleState) -> Option<(usize, RingLane)> {
    let (lane, angle) = ring_angle(layout, v)?;
    Some(((layout.sector_of(angle) + 1) % crate::world::NUM_PORTS, lane))
}

/// `Σ 1{same lane} − 1{other lane}` over NVs whose next node is `port`.
pub fn lane_density(port: usize, lane: RingLane, occupancy: &[(usize, RingLane)]) -> i64 {
    occupancy
        .iter()
        .filter(|(p, _)| *p == port)
        .map(|(_, l)| if *l == lane { 1 } else { -1 })
        .sum()
}

/// `Σ D_safe / d` over NVs closer than `D_safe`; infinite when any NV sits
/// exactly on the EV.
pub fn lane_change_cost(ev: &VehicleState, nvs: &[&VehicleState], d_safe: f64) -> f64 {
    let mut cost = 0.0;
    for nv in nvs {
        let d = ev.position.distance(nv.position);
        if d == 0.0 {
            return f64::INFINITY;
        }
        if d < d_safe {
            cost += d_safe / d;
        }
    }
    cost
}

/// Argmin of the two lane scores; a tie keeps `current`.
pub fn argmin_lane(scores: [f64; 2], current: RingLane) -> RingLane {
    match scores[0].total_cmp(&scores[1]) {
        Ordering::Less => RingLane::Inner,
        Ordering::Greater => RingLane::Outer,
        Ordering::Equal => current,
    }
}

/// Per-lane score `density(port, l) + [l ≠ current]·lane_change_cost` and the
/// resulting choice. Lane-change cost counts NVs in the lane being entered.
pub fn lane_choice(
    layout: &RoundaboutLayout,
    port: usize,
    ev: &VehicleState,
    current: RingLane,
    nvs: &[VehicleState],
    d_safe: f64,
) -> (RingLane, [f64; 2]) {
    let occupancy: Vec<(usize, RingLane)> = nvs.iter().filter_map(|v| next_node(layout, v)).collect();
    let mut scores = [0.0; 2];
    for lane in RingLane::ALL {
        let mut s = lane_density(port, lane, &occupancy) as f64;
        if lane != current {
            let in_lane: Vec<&VehicleState> = nvs.iter().filter(|v| v.lane_coord.lane.ring() == Some(lane)).collect();
            s += lane_change_cost(ev, &in_lane, d_safe);
        }
        scores[lane.index()] = s;
    }
    (argmin_lane(scores, current), scores)
}

/// Preferred ring lane for an EV on the ring: the lane of the next ring node
/// on the cheapest route to its outlet, kept only if `lane_choice` agrees a
/// switch is worthwhile.
pub fn route_lane(
    graph: &RoadGraph,
    layout: &RoundaboutLayout,
    ev: &VehicleState,
    exit_port: usize,
    nvs: &[VehicleState],
    weights: &PlannerWeights,
) -> Option<RingLane> {
    let (port, lane) = next_node(layout, ev)?;
    let start = graph.ring_node(lane, port);
    let path = shortest_path(graph, layout, start, graph.exit_node(exit_port), nvs, weights).ok()?;
    let wanted = path
        .nodes
        .windows(2)
        .find_map(|w| graph.find_edge(w[0], w[1]).filter(|e| e.kind != EdgeKind::LaneChange).map(|_| w[0]))
        .map(|n| if n < crate::world::NUM_PORTS { RingLane::Inner } else { RingLane::Outer })
        .unwrap_or(lane);
    if wanted == lane {
        return Some(lane);
    }
    let (choice, _) = lane_choice(layout, port, ev, lane, nvs, weights.d_safe);
    Some(if choice == wanted { wanted } else { lane })
}
