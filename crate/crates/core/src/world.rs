//! Roundabout geometry, lane coordinates and the road graph.
//!
//! Travel on the ring is counterclockwise. Port `p` sits at angle `2πp/4`;
//! its entrance leg is offset half a lane width to the counterclockwise side
//! of the port axis and its outlet leg to the clockwise side, so inbound
//! traffic keeps right.

use std::f64::consts::{FRAC_PI_2, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec2;

pub const NUM_PORTS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub lane_width: f64,
    pub num_ports: usize,
    pub entry_leg_length: f64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            inner_radius: 40.0,
            outer_radius: 48.0,
            lane_width: 4.0,
            num_ports: NUM_PORTS,
            entry_leg_length: 30.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RingLane {
    Inner,
    Outer,
}

impl RingLane {
    pub const ALL: [RingLane; 2] = [RingLane::Inner, RingLane::Outer];

    pub fn index(self) -> usize {
        match self {
            RingLane::Inner => 0,
            RingLane::Outer => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            RingLane::Inner
        } else {
            RingLane::Outer
        }
    }

    pub fn other(self) -> Self {
        match self {
            RingLane::Inner => RingLane::Outer,
            RingLane::Outer => RingLane::Inner,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Lane {
    Inner,
    Outer,
    EntryLeg(usize),
    ExitLeg(usize),
}

impl Lane {
    pub fn ring(self) -> Option<RingLane> {
        match self {
            Lane::Inner => Some(RingLane::Inner),
            Lane::Outer => Some(RingLane::Outer),
            _ => None,
        }
    }
}

impl From<RingLane> for Lane {
    fn from(l: RingLane) -> Self {
        match l {
            RingLane::Inner => Lane::Inner,
            RingLane::Outer => Lane::Outer,
        }
    }
}

/// Position along a lane centerline; `s` grows in the travel direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaneCoord {
    pub lane: Lane,
    pub s: f64,
}

impl LaneCoord {
    pub fn new(lane: Lane, s: f64) -> Self {
        Self { lane, s }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundaboutLayout {
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub lane_width: f64,
    pub num_ports: usize,
    pub port_angles: Vec<f64>,
    pub entry_leg_length: f64,
}

impl Default for RoundaboutLayout {
    fn default() -> Self {
        Self::build(&LayoutConfig::default()).expect("default layout is valid")
    }
}

impl RoundaboutLayout {
    pub fn build(config: &LayoutConfig) -> Result<Self> {
        let LayoutConfig {
            inner_radius,
            outer_radius,
            lane_width,
            num_ports,
            entry_leg_length,
        } = *config;
        let dims = [inner_radius, outer_radius, lane_width, entry_leg_length];
        if dims.iter().any(|d| !d.is_finite() || *d <= 0.0) {
            return Err(Error::InvalidLayout("dimensions must be positive".into()));
        }
        if inner_radius >= outer_radius {
            return Err(Error::InvalidLayout("degenerate annulus".into()));
        }
        let ring_width = outer_radius - inner_radius;
        if ring_width < lane_width - 1e-12 || ring_width > 2.0 * lane_width + 1e-12 {
            return Err(Error::InvalidLayout(format!(
                "ring width {ring_width} must lie in [lane_width, 2*lane_width]"
            )));
        }
        if num_ports != NUM_PORTS {
            return Err(Error::InvalidLayout(format!("expected {NUM_PORTS} ports, got {num_ports}")));
        }
        Ok(Self {
            inner_radius,
            outer_radius,
            lane_width,
            num_ports,
            port_angles: (0..num_ports).map(|p| TAU * p as f64 / num_ports as f64).collect(),
            entry_leg_length,
        })
    }

    pub fn lane_radius(&self, lane: RingLane) -> f64 {
        match lane {
            RingLane::Inner => self.inner_radius + 0.5 * self.lane_width,
            RingLane::Outer => self.outer_radius - 0.5 * self.lane_width,
        }
    }

    /// Radius separating the two ring lanes.
    pub fn lane_boundary(&self) -> f64 {
        0.5 * (self.lane_radius(RingLane::Inner) + self.lane_radius(RingLane::Outer))
    }

    pub fn ring_lane_at(&self, radius: f64) -> RingLane {
        if radius < self.lane_boundary() {
            RingLane::Inner
        } else {
            RingLane::Outer
        }
    }

    pub fn lane_length(&self, lane: Lane) -> f64 {
        match lane {
            Lane::Inner => TAU * self.lane_radius(RingLane::Inner),
            Lane::Outer => TAU * self.lane_radius(RingLane::Outer),
            Lane::EntryLeg(_) | Lane::ExitLeg(_) => self.entry_leg_length,
        }
    }

    fn leg_offset(&self) -> f64 {
        0.5 * self.lane_width / self.outer_radius
    }

    pub fn entry_angle(&self, port: usize) -> f64 {
        (self.port_angles[port] + self.leg_offset()).rem_euclid(TAU)
    }

    pub fn exit_angle(&self, port: usize) -> f64 {
        (self.port_angles[port] - self.leg_offset()).rem_euclid(TAU)
    }

    /// Radius of the far end of every leg.
    pub fn leg_far_radius(&self) -> f64 {
        self.outer_radius + self.entry_leg_length
    }

    /// Counterclockwise angular distance from `from` to `to`, in `[0, 2π)`.
    pub fn ccw_delta(from: f64, to: f64) -> f64 {
        (to - from).rem_euclid(TAU)
    }

    pub fn to_cartesian(&self, c: LaneCoord) -> Result<Vec2> {
        let len = self.lane_length(c.lane);
        let ring = c.lane.ring().is_some();
        let ok = c.s.is_finite() && c.s >= 0.0 && if ring { c.s < len } else { c.s <= len };
        if !ok {
            return Err(Error::OutOfRange(format!("{:?} s={} (length {len})", c.lane, c.s)));
        }
        Ok(self.to_cartesian_unchecked(c))
    }

    /// Like [`to_cartesian`](Self::to_cartesian) but extrapolates past the lane ends.
    pub fn to_cartesian_unchecked(&self, c: LaneCoord) -> Vec2 {
        match c.lane {
            Lane::Inner | Lane::Outer => {
                let r = self.lane_radius(c.lane.ring().unwrap());
                Vec2::from_polar(r, c.s / r)
            }
            Lane::EntryLeg(p) => Vec2::from_polar(self.leg_far_radius() - c.s, self.entry_angle(p)),
            Lane::ExitLeg(p) => Vec2::from_polar(self.outer_radius + c.s, self.exit_angle(p)),
        }
    }

    /// Travel heading of the lane centerline at `c`.
    pub fn lane_heading(&self, c: LaneCoord) -> f64 {
        match c.lane {
            Lane::Inner | Lane::Outer => {
                let r = self.lane_radius(c.lane.ring().unwrap());
                c.s / r + FRAC_PI_2
            }
            Lane::EntryLeg(p) => self.entry_angle(p) + std::f64::consts::PI,
            Lane::ExitLeg(p) => self.exit_angle(p),
        }
    }

    /// Project a point onto the centerline of `lane`.
    pub fn from_cartesian(&self, lane: Lane, p: Vec2) -> LaneCoord {
        let s = match lane {
            Lane::Inner | Lane::Outer => {
                let r = self.lane_radius(lane.ring().unwrap());
                let s = p.angle() * r;
                if s >= TAU * r {
                    0.0
                } else {
                    s
                }
            }
            Lane::EntryLeg(port) => self.leg_far_radius() - p.dot(Vec2::unit(self.entry_angle(port))),
            Lane::ExitLeg(port) => p.dot(Vec2::unit(self.exit_angle(port))) - self.outer_radius,
        };
        LaneCoord::new(lane, s)
    }

    /// Move `distance` metres downstream along the lane network: ring lanes
    /// wrap, entry legs continue onto the outer lane at the merge angle and
    /// exit legs extend past their end.
    pub fn advance(&self, c: LaneCoord, distance: f64) -> LaneCoord {
        let s = c.s + distance;
        match c.lane {
            Lane::Inner | Lane::Outer => LaneCoord::new(c.lane, s.rem_euclid(self.lane_length(c.lane))),
            Lane::EntryLeg(p) if s > self.entry_leg_length => {
                let r = self.lane_radius(RingLane::Outer);
                let start = self.entry_angle(p) * r;
                LaneCoord::new(Lane::Outer, (start + s - self.entry_leg_length).rem_euclid(TAU * r))
            }
            _ => LaneCoord::new(c.lane, s),
        }
    }

    /// Index of the last port passed when travelling counterclockwise to `angle`.
    pub fn sector_of(&self, angle: f64) -> usize {
        let sector = TAU / self.num_ports as f64;
        ((angle.rem_euclid(TAU) / sector).floor() as usize).min(self.num_ports - 1)
    }
}

pub type NodeId = usize;
pub type EdgeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Ring { lane: RingLane, port: usize },
    EntryLeg(usize),
    ExitLeg(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub position: Vec2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeKind {
    Arc,
    Entry,
    Exit,
    LaneChange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub id: EdgeId,
    pub from: NodeId,
    pub to: NodeId,
    pub kind: EdgeKind,
    pub length: f64,
}

/// Ring nodes sit at the port angles, one per lane; leg nodes sit at the far
/// ends of the entrance and outlet legs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    outgoing: Vec<Vec<EdgeId>>,
}

impl RoadGraph {
    pub fn build(layout: &RoundaboutLayout) -> Self {
        let n = layout.num_ports;
        let mut nodes = Vec::with_capacity(4 * n);
        for lane in RingLane::ALL {
            for port in 0..n {
                nodes.push(Node {
                    id: nodes.len(),
                    kind: NodeKind::Ring { lane, port },
                    position: Vec2::from_polar(layout.lane_radius(lane), layout.port_angles[port]),
                });
            }
        }
        for port in 0..n {
            nodes.push(Node {
                id: nodes.len(),
                kind: NodeKind::EntryLeg(port),
                position: Vec2::from_polar(layout.leg_far_radius(), layout.entry_angle(port)),
            });
        }
        for port in 0..n {
            nodes.push(Node {
                id: nodes.len(),
                kind: NodeKind::ExitLeg(port),
                position: Vec2::from_polar(layout.leg_far_radius(), layout.exit_angle(port)),
            });
        }

        let mut graph = Self {
            nodes,
            edges: Vec::new(),
            outgoing: vec![Vec::new(); 4 * n],
        };
        for lane in RingLane::ALL {
            let quarter = layout.lane_length(lane.into()) / n as f64;
            for port in 0..n {
                graph.add_edge(
                    graph.ring_node(lane, port),
                    graph.ring_node(lane, (port + 1) % n),
                    EdgeKind::Arc,
                    quarter,
                );
            }
        }
        for port in 0..n {
            let (inner, outer) = (graph.ring_node(RingLane::Inner, port), graph.ring_node(RingLane::Outer, port));
            graph.add_edge(inner, outer, EdgeKind::LaneChange, layout.lane_width);
            graph.add_edge(outer, inner, EdgeKind::LaneChange, layout.lane_width);
        }
        for port in 0..n {
            graph.add_edge(
                graph.entry_node(port),
                graph.ring_node(RingLane::Outer, port),
                EdgeKind::Entry,
                layout.entry_leg_length,
            );
            graph.add_edge(
                graph.ring_node(RingLane::Outer, port),
                graph.exit_node(port),
                EdgeKind::Exit,
                layout.entry_leg_length,
            );
        }
        graph
    }

    fn add_edge(&mut self, from: NodeId, to: NodeId, kind: EdgeKind, length: f64) {
        let id = self.edges.len();
        self.edges.push(Edge { id, from, to, kind, length });
        self.outgoing[from].push(id);
    }

    fn ports(&self) -> usize {
        self.nodes.len() / 4
    }

    pub fn ring_node(&self, lane: RingLane, port: usize) -> NodeId {
        lane.index() * self.ports() + port
    }

    pub fn entry_node(&self, port: usize) -> NodeId {
        2 * self.ports() + port
    }

    pub fn exit_node(&self, port: usize) -> NodeId {
        3 * self.ports() + port
    }

    pub fn outgoing(&self, node: NodeId) -> impl Iterator<Item = &Edge> {
        self.outgoing[node].iter().map(move |&e| &self.edges[e])
    }

    pub fn find_edge(&self, from: NodeId, to: NodeId) -> Option<&Edge> {
        self.outgoing(from).find(|e| e.to == to)
    }

    /// Edge carrying a vehicle at `c`. A vehicle exactly on a node belongs to
    /// the edge leaving that node.
    pub fn edge_at(&self, layout: &RoundaboutLayout, c: LaneCoord) -> Option<EdgeId> {
        let n = self.ports();
        let find = |from: NodeId, kind: EdgeKind| {
            self.outgoing(from).find(|e| e.kind == kind).map(|e| e.id)
        };
        match c.lane {
            Lane::Inner | Lane::Outer => {
                let lane = c.lane.ring().unwrap();
                let quarter = layout.lane_length(c.lane) / n as f64;
                let port = ((c.s / quarter).floor().max(0.0) as usize).min(n - 1);
                find(self.ring_node(lane, port), EdgeKind::Arc)
            }
            Lane::EntryLeg(p) => find(self.entry_node(p), EdgeKind::Entry),
            Lane::ExitLeg(p) => self
                .edges
                .iter()
                .find(|e| e.kind == EdgeKind::Exit && e.to == self.exit_node(p))
                .map(|e| e.id),
        }
    }

    /// Nodes reachable from `start` by a breadth-first walk.
    pub fn reachable(&self, start: NodeId) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = std::collections::VecDeque::from([start]);
        seen[start] = true;
        while let Some(u) = queue.pop_front() {
            for e in self.outgoing(u) {
                if !seen[e.to] {
                    seen[e.to] = true;
                    queue.push_back(e.to);
                }
            }
        }
        seen
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn default_layout_dimensions() {
        let l = RoundaboutLayout::default();
        assert_eq!((l.inner_radius, l.outer_radius, l.lane_width, l.num_ports), (40.0, 48.0, 4.0, 4));
        assert!(l.port_angles.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn rejects_bad_layouts() {
        let degenerate = LayoutConfig { inner_radius: 40.0, outer_radius: 40.0, ..Default::default() };
        let err = RoundaboutLayout::build(&degenerate).unwrap_err();
        assert!(err.to_string().contains("degenerate annulus"));
        let negative = LayoutConfig { lane_width: -1.0, ..Default::default() };
        assert!(RoundaboutLayout::build(&negative).is_err());
        let ports = LayoutConfig { num_ports: 3, ..Default::default() };
        assert!(RoundaboutLayout::build(&ports).is_err());
    }

    #[test]
    fn miniature_layout_is_valid() {
        let cfg = LayoutConfig { inner_radius: 10.0, outer_radius: 14.0, lane_width: 4.0, ..Default::default() };
        assert!(RoundaboutLayout::build(&cfg).is_ok());
    }

    #[test]
    fn centerline_points() {
        let l = RoundaboutLayout::default();
        let p = l.to_cartesian(LaneCoord::new(Lane::Inner, 0.0)).unwrap();
        assert!(close(p.x, 42.0, 1e-12) && close(p.y, 0.0, 1e-12));
        let p = l.to_cartesian(LaneCoord::new(Lane::Outer, 0.0)).unwrap();
        assert!(close(p.x, 46.0, 1e-12) && close(p.y, 0.0, 1e-12));
        let quarter = l.lane_length(Lane::Inner) / 4.0;
        let p = l.to_cartesian(LaneCoord::new(Lane::Inner, quarter)).unwrap();
        assert!(close(p.x, 0.0, 1e-9) && close(p.y, 42.0, 1e-9));
    }

    #[test]
    fn out_of_range_coordinates() {
        let l = RoundaboutLayout::default();
        assert!(l.to_cartesian(LaneCoord::new(Lane::Inner, -1.0)).is_err());
        assert!(l.to_cartesian(LaneCoord::new(Lane::Inner, l.lane_length(Lane::Inner))).is_err());
        assert!(l.to_cartesian(LaneCoord::new(Lane::EntryLeg(0), 30.5)).is_err());
        assert!(l.to_cartesian(LaneCoord::new(Lane::EntryLeg(0), 30.0)).is_ok());
    }

    #[test]
    fn round_trip_all_lanes() {
        let l = RoundaboutLayout::default();
        let lanes = [Lane::Inner, Lane::Outer, Lane::EntryLeg(2), Lane::ExitLeg(3)];
        for lane in lanes {
            let len = l.lane_length(lane);
            for i in 0..50 {
                let s = len * i as f64 / 50.0;
                let c = LaneCoord::new(lane, s);
                let back = l.from_cartesian(lane, l.to_cartesian(c).unwrap());
                assert!(close(back.s, s, 1e-9), "{lane:?} {s} -> {}", back.s);
            }
        }
    }

    #[test]
    fn graph_counts_and_lengths() {
        let l = RoundaboutLayout::default();
        let g = RoadGraph::build(&l);
        assert_eq!(g.nodes.len(), 16);
        let count = |k: EdgeKind| g.edges.iter().filter(|e| e.kind == k).count();
        // one-way counterclockwise arcs: 4 per lane
        assert_eq!(count(EdgeKind::Arc), 8);
        assert_eq!(count(EdgeKind::LaneChange), 8);
        assert_eq!(count(EdgeKind::Entry), 4);
        assert_eq!(count(EdgeKind::Exit), 4);
        let inner_arc = g.find_edge(g.ring_node(RingLane::Inner, 0), g.ring_node(RingLane::Inner, 1)).unwrap();
        assert!(close(inner_arc.length, TAU * 42.0 / 4.0, 1e-9));
        assert!(close(inner_arc.length, 65.97, 0.01));
        for lane in RingLane::ALL {
            let total: f64 = g
                .edges
                .iter()
                .filter(|e| e.kind == EdgeKind::Arc && matches!(g.nodes[e.from].kind, NodeKind::Ring { lane: ln, .. } if ln == lane))
                .map(|e| e.length)
                .sum();
            assert!(close(total, TAU * l.lane_radius(lane), 1e-6));
        }
    }

    #[test]
    fn every_entry_reaches_every_exit() {
        let g = RoadGraph::build(&RoundaboutLayout::default());
        for a in 0..4 {
            let seen = g.reachable(g.entry_node(a));
            for b in 0..4 {
                assert!(seen[g.exit_node(b)], "entry {a} -> exit {b}");
            }
        }
    }

    #[test]
    fn edge_assignment_boundary_goes_downstream() {
        let l = RoundaboutLayout::default();
        let g = RoadGraph::build(&l);
        let quarter = l.lane_length(Lane::Outer) / 4.0;
        let e = g.edge_at(&l, LaneCoord::new(Lane::Outer, quarter)).unwrap();
        assert_eq!(g.edges[e].from, g.ring_node(RingLane::Outer, 1));
        let e = g.edge_at(&l, LaneCoord::new(Lane::Outer, quarter - 1e-6)).unwrap();
        assert_eq!(g.edges[e].from, g.ring_node(RingLane::Outer, 0));
    }
}
