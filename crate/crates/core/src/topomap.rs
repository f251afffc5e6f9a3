//! Topological experience map: local view cells, location nodes, links and
//! shortest-route planning over what has been traversed.
//!
//! Known links were walked by the agent and may be followed either way (the
//! grid is deterministic, so every walk can be undone). Imagined links come
//! from the planner, are one-way and carry their plan and EFE score.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::gridworld::Action;
use crate::pose::PoseBelief;
use crate::worldmodel::LatentState;

pub type NodeId = usize;

const FORMAT: &str = "homerun-map";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TopoError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("non-finite EFE score")]
    NonFinite,
    #[error("map document: {0}")]
    Document(String),
}

pub type Result<T> = std::result::Result<T, TopoError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopoConfig {
    /// Cosine distance below which a view matches a cell.
    pub delta_view: f64,
    /// Weight of a revisit's posterior in a node's state distribution.
    pub ema: f64,
    /// Loop closure only fires for cells excited within this many tiles.
    pub closure_radius: f64,
    /// ... and within this heading difference, degrees.
    pub closure_heading: f64,
    pub pose_sigma_xy: f64,
    pub pose_sigma_deg: f64,
}

impl Default for TopoConfig {
    fn default() -> Self {
        TopoConfig {
            delta_view: 0.1,
            ema: 0.1,
            closure_radius: 0.5,
            closure_heading: 45.0,
            pose_sigma_xy: 0.25,
            pose_sigma_deg: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewCell {
    pub template: Vec<f64>,
    pub node: NodeId,
    pub pose: PoseBelief,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationNode {
    pub id: NodeId,
    pub state: LatentState,
    pub pose: PoseBelief,
    pub created: usize,
    pub cell: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub from: NodeId,
    pub to: NodeId,
    /// Actions that lead from `from` to `to`.
    pub actions: Vec<Action>,
    pub cost: usize,
    pub imagined: bool,
    pub efe: Option<f64>,
}

/// What an update did.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateKind {
    First,
    Created,
    Stayed,
    Closed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateOutcome {
    pub kind: UpdateKind,
    pub node: NodeId,
    /// Pose belief after the update; snapped to the node on loop closure.
    pub pose: PoseBelief,
}

/// One leg of a route: a link index and whether it is walked backwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Leg {
    pub link: usize,
    pub reversed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub nodes: Vec<NodeId>,
    pub legs: Vec<Leg>,
    pub cost: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperienceMap {
    pub config: TopoConfig,
    pub cells: Vec<ViewCell>,
    pub nodes: Vec<LocationNode>,
    pub links: Vec<Link>,
    pub current: Option<NodeId>,
    /// Actions executed since leaving `current`.
    pub pending: Vec<Action>,
    pub steps: usize,
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    map: ExperienceMap,
}

impl ExperienceMap {
    pub fn new(config: TopoConfig) -> Self {
        ExperienceMap { config, cells: Vec::new(), nodes: Vec::new(), links: Vec::new(), current: None, pending: Vec::new(), steps: 0 }
    }

    /// The first node ever created.
    pub fn home(&self) -> Option<NodeId> {
        (!self.nodes.is_empty()).then_some(0)
    }

    pub fn node(&self, id: NodeId) -> Result<&LocationNode> {
        self.nodes.get(id).ok_or(TopoError::UnknownNode(id))
    }

    /// First cell whose template lies within `delta_view` of `feature`.
    pub fn match_view(&self, feature: &[f64]) -> Option<&ViewCell> {
        self.cells.iter().find(|c| cosine_distance(&c.template, feature) < self.config.delta_view)
    }

    /// Whether `feature` matches the view cell of `node`.
    pub fn view_matches(&self, node: NodeId, feature: &[f64]) -> Result<bool> {
        let cell = &self.cells[self.node(node)?.cell];
        Ok(cosine_distance(&cell.template, feature) < self.config.delta_view)
    }

    fn closure_candidate(&self, feature: &[f64], pose: &PoseBelief) -> Option<NodeId> {
        self.cells
            .iter()
            .find(|c| {
                cosine_distance(&c.template, feature) < self.config.delta_view
                    && c.pose.distance(pose) <= self.config.closure_radius
                    && c.pose.heading_diff(pose).abs() <= self.config.closure_heading
            })
            .map(|c| c.node)
    }

    /// Registers one executed step. `action` is what led here (none at the
    /// very start); `feature` the view feature, `state` the posterior.
    pub fn update(&mut self, feature: &[f64], state: &LatentState, pose: PoseBelief, action: Option<Action>) -> UpdateOutcome {
        self.steps += 1;
        if let Some(a) = action {
            if self.current.is_some() {
                self.pending.push(a);
            }
        }
        match (self.current, self.closure_candidate(feature, &pose)) {
            (Some(cur), Some(hit)) if hit == cur => UpdateOutcome { kind: UpdateKind::Stayed, node: cur, pose },
            (Some(cur), Some(hit)) => {
                let actions = std::mem::take(&mut self.pending);
                self.add_known_link(cur, hit, actions);
                let ema = self.config.ema;
                self.nodes[hit].state.blend(state, ema);
                self.current = Some(hit);
                let snapped = pose.reset_to(self.nodes[hit].pose.nearest());
                UpdateOutcome { kind: UpdateKind::Closed, node: hit, pose: snapped }
            }
            (None, Some(hit)) => {
                self.current = Some(hit);
                UpdateOutcome { kind: UpdateKind::Closed, node: hit, pose }
            }
            (cur, None) => {
                let id = self.nodes.len();
                self.cells.push(ViewCell { template: feature.to_vec(), node: id, pose });
                self.nodes.push(LocationNode { id, state: state.clone(), pose, created: self.steps, cell: self.cells.len() - 1 });
                let kind = match cur {
                    Some(c) => {
                        let actions = std::mem::take(&mut self.pending);
                        self.add_known_link(c, id, actions);
                        UpdateKind::Created
                    }
                    None => UpdateKind::First,
                };
                self.current = Some(id);
                UpdateOutcome { kind, node: id, pose }
            }
        }
    }

    /// Adds a traversed link, keeping only the cheapest per node pair.
    fn add_known_link(&mut self, from: NodeId, to: NodeId, actions: Vec<Action>) {
        let cost = actions.len();
        let existing = self.links.iter().position(|l| {
            !l.imagined && ((l.from == from && l.to == to) || (l.from == to && l.to == from))
        });
        match existing {
            Some(i) if self.links[i].cost <= cost => {}
            Some(i) => self.links[i] = Link { from, to, actions, cost, imagined: false, efe: None },
            None => self.links.push(Link { from, to, actions, cost, imagined: false, efe: None }),
        }
    }

    /// Adds a provisional one-way link. A lower-scoring duplicate replaces
    /// the previous imagined link; known links are never touched.
    pub fn insert_imagined_link(&mut self, from: NodeId, to: NodeId, plan: Vec<Action>, efe: f64) -> Result<()> {
        self.node(from)?;
        self.node(to)?;
        if !efe.is_finite() {
            return Err(TopoError::NonFinite);
        }
        let link = Link { from, to, cost: plan.len(), actions: plan, imagined: true, efe: Some(efe) };
        match self.links.iter().position(|l| l.imagined && l.from == from && l.to == to) {
            Some(i) if self.links[i].efe.is_some_and(|old| old <= efe) => {}
            Some(i) => self.links[i] = link,
            None => self.links.push(link),
        }
        Ok(())
    }

    /// Drops the imagined link `from -> to`; returns whether one existed.
    pub fn remove_imagined_link(&mut self, from: NodeId, to: NodeId) -> bool {
        let before = self.links.len();
        self.links.retain(|l| !(l.imagined && l.from == from && l.to == to));
        self.links.len() != before
    }

    /// Minimum-cost route over links; ties go to the lower node id.
    pub fn plan_route(&self, from: NodeId, to: NodeId, imagined: bool) -> Result<Option<Route>> {
        self.node(from)?;
        self.node(to)?;
        let n = self.nodes.len();
        let mut adj: Vec<Vec<(NodeId, usize, Leg)>> = vec![Vec::new(); n];
        for (i, l) in self.links.iter().enumerate() {
            if l.imagined && !imagined {
                continue;
            }
            adj[l.from].push((l.to, l.cost, Leg { link: i, reversed: false }));
            if !l.imagined {
                adj[l.to].push((l.from, l.cost, Leg { link: i, reversed: true }));
            }
        }
        let mut dist = vec![usize::MAX; n];
        let mut prev: Vec<Option<(NodeId, Leg)>> = vec![None; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::from([Reverse((0usize, from))]);
        dist[from] = 0;
        while let Some(Reverse((d, u))) = heap.pop() {
            if done[u] {
                continue;
            }
            done[u] = true;
            for &(v, c, leg) in &adj[u] {
                let nd = d + c;
                let better = nd < dist[v] || (nd == dist[v] && !done[v] && prev[v].is_some_and(|(p, _)| u < p));
                if better {
                    dist[v] = nd;
                    prev[v] = Some((u, leg));
                    heap.push(Reverse((nd, v)));
                }
            }
        }
        if dist[to] == usize::MAX {
            return Ok(None);
        }
        let (mut nodes, mut legs) = (vec![to], Vec::new());
        let mut cur = to;
        while let Some((p, leg)) = prev[cur] {
            if cur == from {
                break;
            }
            nodes.push(p);
            legs.push(leg);
            cur = p;
        }
        nodes.reverse();
        legs.reverse();
        Ok(Some(Route { nodes, legs, cost: dist[to] }))
    }

    /// Shortest known node path, as a list of node ids.
    pub fn plan_known(&self, from: NodeId, to: NodeId) -> Result<Option<Vec<NodeId>>> {
        Ok(self.plan_route(from, to, false)?.map(|r| r.nodes))
    }

    /// Action sequence that walks `route`, reversing backwards legs.
    pub fn route_actions(&self, route: &Route) -> Vec<Action> {
        let mut out = Vec::new();
        for leg in &route.legs {
            let l = &self.links[leg.link];
            if leg.reversed {
                out.extend(reverse_actions(&l.actions));
            } else {
                out.extend(&l.actions);
            }
        }
        out
    }

    /// Checks structural invariants; returns a description of the first breach.
    pub fn check_integrity(&self) -> std::result::Result<(), String> {
        let n = self.nodes.len();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return Err(format!("node {i} carries id {}", node.id));
            }
            if self.cells.get(node.cell).map(|c| c.node) != Some(i) {
                return Err(format!("node {i} and its view cell disagree"));
            }
        }
        for c in &self.cells {
            if c.node >= n {
                return Err(format!("view cell points at missing node {}", c.node));
            }
        }
        for l in &self.links {
            if l.from >= n || l.to >= n {
                return Err(format!("dangling link {} -> {}", l.from, l.to));
            }
            if l.cost != l.actions.len() {
                return Err(format!("link {} -> {} costs {} for {} actions", l.from, l.to, l.cost, l.actions.len()));
            }
        }
        if let Some(c) = self.current {
            if c >= n {
                return Err(format!("current node {c} missing"));
            }
        }
        if let Some(h) = self.home() {
            for id in 0..n {
                if self.plan_route(h, id, false).map_err(|e| e.to_string())?.is_none() {
                    return Err(format!("node {id} is cut off from home"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let doc = Document { format: FORMAT.into(), version: VERSION, map: self.clone() };
        serde_json::to_string_pretty(&doc).expect("map serialises")
    }

    pub fn from_json(text: &str) -> Result<ExperienceMap> {
        let doc: Document = serde_json::from_str(text).map_err(|e| TopoError::Document(e.to_string()))?;
        if doc.format != FORMAT || doc.version != VERSION {
            return Err(TopoError::Document(format!("unsupported {} v{}", doc.format, doc.version)));
        }
        doc.map.check_integrity().map_err(TopoError::Document)?;
        Ok(doc.map)
    }
}

/// Actions that undo `actions` in a deterministic grid: turn around, replay
/// the inverse steps backwards, turn around again. Leading and trailing
/// turns are folded so no more than two quarter turns are spent per pivot.
pub fn reverse_actions(actions: &[Action]) -> Vec<Action> {
    let mut raw = vec![Action::TurnLeft, Action::TurnLeft];
    for &a in actions.iter().rev() {
        raw.push(match a {
            Action::Forward => Action::Forward,
            Action::TurnLeft => Action::TurnRight,
            Action::TurnRight => Action::TurnLeft,
        });
    }
    raw.extend([Action::TurnLeft, Action::TurnLeft]);
    compress_turns(&raw)
}

/// Collapses each run of turns to its net rotation (at most two turns).
pub fn compress_turns(actions: &[Action]) -> Vec<Action> {
    let mut out = Vec::new();
    let mut net = 0i32;
    let flush = |net: &mut i32, out: &mut Vec<Action>| {
        match net.rem_euclid(4) {
            1 => out.push(Action::TurnLeft),
            2 => out.extend([Action::TurnLeft, Action::TurnLeft]),
            3 => out.push(Action::TurnRight),
            _ => {}
        }
        *net = 0;
    };
    for &a in actions {
        match a {
            Action::TurnLeft => net += 1,
            Action::TurnRight => net -= 1,
            Action::Forward => {
                flush(&mut net, &mut out);
                out.push(Action::Forward);
            }
        }
    }
    flush(&mut net, &mut out);
    out
}
