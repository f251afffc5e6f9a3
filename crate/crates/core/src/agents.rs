//! Home-run policies: TraceBack, Greedy and the EFE shortcut agent.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gridworld::{Action, Heading, Pose, World, WorldSpec};
use crate::planner::{decide_shortcut, effective_threshold, score_link, Decision, LinkScore, PlannerConfig, PlannerError, Start, Target};
use crate::pose::PoseBelief;
use crate::topomap::{compress_turns, reverse_actions, ExperienceMap, NodeId, TopoConfig, UpdateKind};
use crate::worldmodel::{Belief, WorldModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Greedy,
    TraceBack,
    Ours,
}

impl AgentKind {
    pub const ALL: [AgentKind; 3] = [AgentKind::Greedy, AgentKind::TraceBack, AgentKind::Ours];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Greedy => "Greedy",
            AgentKind::TraceBack => "TraceBack",
            AgentKind::Ours => "Ours",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Reached,
    BudgetExceeded,
    /// Everything planned was executed without arriving.
    Stranded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub budget: usize,
    pub planner: PlannerConfig,
    pub topo: TopoConfig,
    /// Re-score the remaining shortcut after every executed step.
    pub replan: bool,
    /// Home counts as reached within this many tiles (plus a view match).
    pub home_radius: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig { budget: 200, planner: PlannerConfig::default(), topo: TopoConfig::default(), replan: true, home_radius: 1.0 }
    }
}

/// The walk that precedes a home run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outbound {
    pub home: Pose,
    pub actions: Vec<Action>,
}

impl Outbound {
    pub fn poses(&self, world: &World) -> Vec<Pose> {
        let mut p = self.home;
        let mut out = vec![p];
        for &a in &self.actions {
            p = world.next_pose(p, a).0;
            out.push(p);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub action: Action,
    pub executed: bool,
    pub x: i32,
    pub y: i32,
    pub heading: f64,
    pub node: Option<NodeId>,
    #[serde(skip_serializing_if = "String::is_empty", default)]
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionInfo {
    pub horizon: usize,
    pub g: f64,
    pub threshold: f64,
    pub shortcut: bool,
    pub plan: Vec<Action>,
    /// The shortcut ran into an obstacle and was abandoned.
    pub dead_end: bool,
    pub replans: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub agent: AgentKind,
    pub spec: WorldSpec,
    pub doors: Vec<bool>,
    pub outbound: Outbound,
    pub home_node: Option<NodeId>,
    pub homerun: Vec<StepRecord>,
    pub step_count: usize,
    pub outcome: Outcome,
    pub decision: Option<DecisionInfo>,
}

impl Episode {
    fn new(agent: AgentKind, world: &World, outbound: &Outbound) -> Self {
        Episode {
            agent,
            spec: world.spec().clone(),
            doors: world.door_states().to_vec(),
            outbound: outbound.clone(),
            home_node: None,
            homerun: Vec::new(),
            step_count: 0,
            outcome: Outcome::Stranded,
            decision: None,
        }
    }

    fn push(&mut self, action: Action, blocked: bool, pose: Pose, node: Option<NodeId>, note: impl Into<String>) {
        self.homerun.push(StepRecord {
            step: self.homerun.len() + 1,
            action,
            executed: !blocked,
            x: pose.x,
            y: pose.y,
            heading: pose.heading.degrees(),
            node,
            note: note.into(),
        });
        self.step_count = self.homerun.len();
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.homerun {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()
    }
}

pub fn read_jsonl(path: &Path) -> std::io::Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().map(|l| serde_json::from_str(l).map_err(std::io::Error::from)).collect()
}

/// Ground-truth arrival test for the model-free baselines: same rendered
/// view as home, within one tile.
fn at_home(world: &World, pose: Pose, home: Pose) -> bool {
    (pose.x - home.x).abs() + (pose.y - home.y).abs() <= 1 && world.render_view(&pose) == world.render_view(&home)
}

/// Replays the outbound walk backwards.
pub fn run_traceback(world: &World, outbound: &Outbound, budget: usize) -> Episode {
    let mut ep = Episode::new(AgentKind::TraceBack, world, outbound);
    let mut pose = *outbound.poses(world).last().expect("at least the home pose");
    for a in reverse_actions(&outbound.actions) {
        if ep.step_count >= budget {
            ep.outcome = Outcome::BudgetExceeded;
            return ep;
        }
        let (next, blocked) = world.next_pose(pose, a);
        pose = next;
        ep.push(a, blocked, pose, None, "");
    }
    ep.outcome = if at_home(world, pose, outbound.home) { Outcome::Reached } else { Outcome::Stranded };
    ep
}

fn manhattan(p: Pose, q: Pose) -> i32 {
    (p.x - q.x).abs() + (p.y - q.y).abs()
}

/// Headings that reduce the Manhattan distance to `goal`, larger gap first.
fn greedy_headings(p: Pose, goal: Pose) -> Vec<Heading> {
    let (dx, dy) = (goal.x - p.x, goal.y - p.y);
    let mut hs = Vec::new();
    let hx = Heading::from_delta(dx.signum(), 0);
    let hy = Heading::from_delta(0, dy.signum());
    if dx.abs() >= dy.abs() {
        hs.extend(hx);
        hs.extend(hy);
    } else {
        hs.extend(hy);
        hs.extend(hx);
    }
    hs
}

/// One turn towards `target`; left when it is straight behind.
fn turn_towards(from: Heading, target: Heading) -> Option<Action> {
    match (target.quarters() - from.quarters()).rem_euclid(4) {
        0 => None,
        3 => Some(Action::TurnRight),
        _ => Some(Action::TurnLeft),
    }
}

/// Greedy goal seeking with wall following.
///
/// Walks along a heading that shrinks the Manhattan distance while the tile
/// ahead is free. When the way is barred it follows the obstacle, keeping it
/// on one hand, until a greedy heading is free again at a point closer to the
/// goal than where it started following. The hand is picked from the
/// outbound walk: the agent turns towards the way it came at the nearest
/// outbound pose.
pub fn run_greedy(world: &World, outbound: &Outbound, budget: usize) -> Episode {
    let mut ep = Episode::new(AgentKind::Greedy, world, outbound);
    let trail = outbound.poses(world);
    let goal = outbound.home;
    let mut pose = *trail.last().expect("at least the home pose");
    // Some(right_hand, distance when following began)
    let mut follow: Option<(bool, i32)> = None;
    let mut turned_in = false;
    // heading to settle on before following starts
    let mut settle: Option<Heading> = None;
    let free = |p: Pose| {
        let (x, y) = p.ahead(1);
        world.walkable(x, y)
    };
    while pose != goal {
        if ep.step_count >= budget {
            ep.outcome = Outcome::BudgetExceeded;
            return ep;
        }
        let action = if pose.x == goal.x && pose.y == goal.y {
            turn_towards(pose.heading, goal.heading).expect("heading differs")
        } else {
            let wanted = greedy_headings(pose, goal);
            let open: Vec<Heading> = wanted.iter().copied().filter(|h| free(Pose { heading: *h, ..pose })).collect();
            if let Some((_, since)) = follow {
                if !open.is_empty() && manhattan(pose, goal) < since {
                    follow = None;
                }
            }
            match follow {
                None if open.is_empty() => {
                    let (travel, right_hand) = follow_start(&trail, pose, wanted[0], &free);
                    follow = Some((right_hand, manhattan(pose, goal)));
                    settle = Some(travel);
                    turn_towards(pose.heading, travel).unwrap_or(Action::Forward)
                }
                Some(_) if settle.is_some_and(|h| h != pose.heading) => {
                    turn_towards(pose.heading, settle.expect("checked")).expect("heading differs")
                }
                None if open.contains(&pose.heading) => Action::Forward,
                None => turn_towards(pose.heading, open[0]).expect("open heading differs"),
                Some((right_hand, _)) => wall_follow(pose, right_hand, turned_in, &free),
            }
        };
        if settle == Some(pose.heading) || follow.is_none() {
            settle = None;
        }
        turned_in = match follow {
            Some((true, _)) => action == Action::TurnRight,
            Some((false, _)) => action == Action::TurnLeft,
            None => false,
        };
        let (next, blocked) = world.next_pose(pose, action);
        pose = next;
        ep.push(action, blocked, pose, None, if follow.is_some() { "follow" } else { "" });
    }
    ep.outcome = Outcome::Reached;
    ep
}

/// Direction to walk along an obstacle barring `wall`, and whether the
/// obstacle then sits on the right hand. Prefers the way the outbound walk
/// came at its nearest pose, then the cheaper turn, then the left of `wall`.
fn follow_start(trail: &[Pose], pose: Pose, wall: Heading, free: &impl Fn(Pose) -> bool) -> (Heading, bool) {
    let homeward = trail
        .windows(2)
        .filter(|w| (w[0].x, w[0].y) != (w[1].x, w[1].y))
        .min_by_key(|w| manhattan(w[1], pose))
        .and_then(|w| Heading::from_delta(w[0].x - w[1].x, w[0].y - w[1].y));
    let turns = |h: Heading| match (h.quarters() - pose.heading.quarters()).rem_euclid(4) {
        0 => 0,
        2 => 2,
        _ => 1,
    };
    let mut options = [(wall.left(), true), (wall.right(), false)];
    options.sort_by_key(|&(h, _)| (!free(Pose { heading: h, ..pose }), Some(h) != homeward, turns(h)));
    options[0]
}

/// Hand-on-wall step. After turning towards the wall side the agent steps
/// into the opening; otherwise it turns into openings on the wall side, walks
/// on, or turns away when barred.
fn wall_follow(pose: Pose, right_hand: bool, turned_in: bool, free: &impl Fn(Pose) -> bool) -> Action {
    let (towards, away) = if right_hand {
        (Action::TurnRight, Action::TurnLeft)
    } else {
        (Action::TurnLeft, Action::TurnRight)
    };
    if turned_in && free(pose) {
        return Action::Forward;
    }
    if free(pose.apply(towards)) && !turned_in {
        towards
    } else if free(pose) {
        Action::Forward
    } else {
        away
    }
}

/// Agent state while running the model.
struct Runner<'a> {
    world: &'a World,
    model: &'a WorldModel<f32>,
    cfg: &'a AgentConfig,
    map: ExperienceMap,
    belief: Belief,
    pose: Pose,
    est: PoseBelief,
    ep: Episode,
}

impl Runner<'_> {
    fn observe(&mut self, action: Option<Action>, blocked: bool) -> NodeId {
        let obs = self.world.render_view(&self.pose);
        if let Some(a) = action {
            self.est = self.est.integrate(a, blocked);
        }
        self.belief = self.model.filter(&self.belief, action, &obs);
        let feature = self.model.view_feature(&obs);
        let out = self.map.update(&feature, &self.belief.state, self.est, action);
        if out.kind == UpdateKind::Closed {
            self.est = out.pose;
        }
        out.node
    }

    /// Executes one home-run action; returns whether it was blocked.
    fn act(&mut self, a: Action, note: &str) -> bool {
        let (next, blocked) = self.world.next_pose(self.pose, a);
        self.pose = next;
        let node = self.observe(Some(a), blocked);
        self.ep.push(a, blocked, self.pose, Some(node), note);
        blocked
    }

    fn home_reached(&self, home: NodeId) -> bool {
        let feature = self.model.view_feature(&self.world.render_view(&self.pose));
        let node = &self.map.nodes[home];
        self.map.view_matches(home, &feature).unwrap_or(false) && self.est.distance(&node.pose) <= self.cfg.home_radius
    }

    fn over_budget(&self) -> bool {
        self.ep.step_count >= self.cfg.budget
    }

    /// Walks `actions`, stopping early on the budget.
    fn walk(&mut self, actions: &[Action], note: &str) -> bool {
        for &a in actions {
            if self.over_budget() {
                return false;
            }
            self.act(a, note);
        }
        true
    }

    /// Known route home from node `from`, starting `offset` actions past
    /// the pose where that node was last entered.
    fn known_route_home(&self, from: NodeId, offset: &[Action], home: NodeId) -> Vec<Action> {
        match self.map.plan_route(from, home, false) {
            Ok(Some(r)) => {
                let mut out = reverse_actions(offset);
                out.extend(self.map.route_actions(&r));
                compress_turns(&out)
            }
            _ => Vec::new(),
        }
    }

    fn start(&self) -> Start {
        Start { belief: self.belief.clone(), pose: self.est }
    }

    fn target(&self, home: NodeId) -> Target {
        let n = &self.map.nodes[home];
        Target { state: n.state.clone(), pose: n.pose }
    }
}

/// Walks the outbound path from home, filtering observations and building
/// the experience map.
fn explore<'a>(world: &'a World, model: &'a WorldModel<f32>, outbound: &Outbound, cfg: &'a AgentConfig) -> (Runner<'a>, NodeId) {
    let mut r = Runner {
        world,
        model,
        cfg,
        map: ExperienceMap::new(cfg.topo.clone()),
        belief: Belief::initial(model.config()),
        pose: outbound.home,
        est: PoseBelief::at(outbound.home),
        ep: Episode::new(AgentKind::Ours, world, outbound),
    };
    let home = r.observe(None, false);
    for &a in &outbound.actions {
        let (next, blocked) = world.next_pose(r.pose, a);
        r.pose = next;
        r.observe(Some(a), blocked);
    }
    r.ep.home_node = Some(home);
    (r, home)
}

/// Builds the map along `outbound` and returns it with the home node.
pub fn explore_map(world: &World, model: &WorldModel<f32>, outbound: &Outbound, cfg: &AgentConfig) -> (ExperienceMap, NodeId) {
    let (r, home) = explore(world, model, outbound, cfg);
    (r.map, home)
}

/// Straight-line distance to `node` from the current pose estimate,
/// rounded up: the horizon used when no distance is supplied.
pub fn home_distance(map: &ExperienceMap, node: NodeId, est: &PoseBelief) -> usize {
    est.distance(&map.nodes[node].pose).ceil() as usize
}

/// Explores the outbound walk building the map, then heads home: shortcut
/// when the imagined plan's EFE clears the threshold, otherwise the known
/// route. A blocked shortcut is walked back and the known route taken.
/// `d` is the planning horizon; `None` estimates it from the map.
pub fn run_ours(world: &World, model: &WorldModel<f32>, outbound: &Outbound, d: Option<usize>, cfg: &AgentConfig) -> Result<Episode, PlannerError> {
    let (mut r, home) = explore(world, model, outbound, cfg);
    let origin = r.map.current.expect("map has a node");
    let d = d.unwrap_or_else(|| home_distance(&r.map, home, &r.est));
    let sigma = model.config().obs_sigma;
    let threshold = effective_threshold(&cfg.planner, d, sigma);
    let score = score_link(model, origin, &r.start(), home, &r.target(home), d, &cfg.planner)?;
    let decision = decide_shortcut(&score, threshold);
    let mut info = DecisionInfo {
        horizon: d,
        g: score.g,
        threshold,
        shortcut: matches!(decision, Decision::Shortcut(_)),
        plan: score.best.actions.clone(),
        dead_end: false,
        replans: 0,
    };
    match decision {
        Decision::Shortcut(plan) => {
            r.map.insert_imagined_link(origin, home, plan.clone(), score.g).expect("nodes exist, score finite");
            shortcut(&mut r, origin, home, plan, &mut info)?;
        }
        Decision::Fallback => {
            let route = r.known_route_home(origin, &r.map.pending, home);
            r.walk(&route, "fallback");
        }
    }
    r.ep.decision = Some(info);
    Ok(finish(r, home))
}

/// Explores `outbound` and returns the planning problem posed at its end:
/// the current belief and pose estimate, and the home node as target.
pub fn home_problem(world: &World, model: &WorldModel<f32>, outbound: &Outbound, cfg: &AgentConfig) -> (Start, Target) {
    let (r, home) = explore(world, model, outbound, cfg);
    (r.start(), r.target(home))
}

/// Explores `outbound` and scores the imagined link home at horizon `d`.
pub fn score_home(world: &World, model: &WorldModel<f32>, outbound: &Outbound, d: usize, cfg: &AgentConfig) -> Result<LinkScore, PlannerError> {
    let (r, home) = explore(world, model, outbound, cfg);
    let origin = r.map.current.expect("map has a node");
    score_link(model, origin, &r.start(), home, &r.target(home), d, &cfg.planner)
}

/// Takes `plan` as a shortcut without scoring it, as if it had cleared the
/// threshold.
pub fn run_ours_forced(world: &World, model: &WorldModel<f32>, outbound: &Outbound, plan: Vec<Action>, cfg: &AgentConfig) -> Result<Episode, PlannerError> {
    let (mut r, home) = explore(world, model, outbound, cfg);
    let origin = r.map.current.expect("map has a node");
    let mut info = DecisionInfo {
        horizon: plan.len(),
        g: f64::NEG_INFINITY,
        threshold: f64::INFINITY,
        shortcut: true,
        plan: plan.clone(),
        dead_end: false,
        replans: 0,
    };
    r.map.insert_imagined_link(origin, home, plan.clone(), 0.0).expect("nodes exist");
    shortcut(&mut r, origin, home, plan, &mut info)?;
    r.ep.decision = Some(info);
    Ok(finish(r, home))
}

fn shortcut(r: &mut Runner<'_>, origin: NodeId, home: NodeId, plan: Vec<Action>, info: &mut DecisionInfo) -> Result<(), PlannerError> {
    let (model, cfg) = (r.model, r.cfg);
    let sigma = model.config().obs_sigma;
    let offset = r.map.pending.clone();
    let mut remaining = plan;
    let mut executed: Vec<Action> = Vec::new();
    let mut abandon = false;
    while !remaining.is_empty() {
        if r.over_budget() {
            break;
        }
        let a = remaining.remove(0);
        let blocked = r.act(a, "shortcut");
        if blocked {
            info.dead_end = true;
            abandon = true;
            break;
        }
        executed.push(a);
        if cfg.replan && !remaining.is_empty() {
            let h = remaining.len();
            let here = r.map.current.expect("map has a node");
            let s = score_link(model, here, &r.start(), home, &r.target(home), h, &cfg.planner)?;
            info.replans += 1;
            match decide_shortcut(&s, effective_threshold(&cfg.planner, h, sigma)) {
                Decision::Shortcut(p) => remaining = p,
                Decision::Fallback => {
                    abandon = true;
                    break;
                }
            }
        }
    }
    r.map.remove_imagined_link(origin, home);
    if abandon {
        // straight back to where the shortcut began, then the known way
        let mut back = reverse_actions(&executed);
        back.extend(r.known_route_home(origin, &offset, home));
        let back = compress_turns(&back);
        r.walk(&back, "return");
    } else if !r.home_reached(home) {
        let here = r.map.current.expect("map has a node");
        let route = r.known_route_home(here, &r.map.pending, home);
        r.walk(&route, "fallback");
    }
    Ok(())
}

fn finish(r: Runner<'_>, home: NodeId) -> Episode {
    let outcome = if r.home_reached(home) {
        Outcome::Reached
    } else if r.over_budget() {
        Outcome::BudgetExceeded
    } else {
        Outcome::Stranded
    };
    let mut ep = r.ep;
    ep.outcome = outcome;
    ep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::generate_world;
    use crate::worldmodel::ModelConfig;

    /// 2x2 world with a known layout: rooms of pitch `p`, the door between
    /// the two lower rooms at height `door_y`.
    fn world(p: usize, seed: u64) -> World {
        generate_world(&WorldSpec::sample(2, 2, p, seed).unwrap()).unwrap()
    }

    fn walk(world: &World, from: Pose, actions: &[Action]) -> Pose {
        actions.iter().fold(from, |p, &a| world.next_pose(p, a).0)
    }

    #[test]
    fn traceback_of_nothing_is_nothing() {
        let w = world(5, 1);
        let ob = Outbound { home: Pose::new(1, 1, Heading::EAST), actions: vec![] };
        let ep = run_traceback(&w, &ob, 200);
        assert_eq!(ep.step_count, 0);
        assert_eq!(ep.outcome, Outcome::Reached);
    }

    #[test]
    fn traceback_returns_to_the_start_cell() {
        let w = world(6, 2);
        use Action::*;
        let ob = Outbound { home: Pose::new(2, 2, Heading::NORTH), actions: vec![Forward, TurnLeft, Forward] };
        let ep = run_traceback(&w, &ob, 200);
        let end = ep.homerun.last().unwrap();
        assert_eq!((end.x, end.y), (2, 2));
        assert_eq!(ep.outcome, Outcome::Reached);
        assert_eq!(ep.step_count, reverse_actions(&ob.actions).len());
    }

    #[test]
    fn greedy_at_goal_takes_no_steps() {
        let w = world(5, 3);
        let ob = Outbound { home: Pose::new(2, 2, Heading::EAST), actions: vec![] };
        assert_eq!(run_greedy(&w, &ob, 200).step_count, 0);
    }

    #[test]
    fn greedy_goes_straight_through_an_open_door() {
        let w = world(6, 4);
        let door = *w.spec().doors.iter().find(|d| d.x == 6 && d.y < 6).unwrap();
        let home = Pose::new(3, door.y, Heading::WEST);
        let end = Pose::new(8, door.y, Heading::WEST);
        let actions = w.shortest_actions(home, end, &[(door.x, door.y)]).unwrap();
        let ob = Outbound { home, actions };
        assert_eq!(walk(&w, home, &ob.actions), end);
        let ep = run_greedy(&w, &ob, 200);
        assert_eq!(ep.outcome, Outcome::Reached);
        assert_eq!(ep.step_count, 5);
    }

    #[test]
    fn greedy_works_around_a_closed_door() {
        let w = world(6, 4);
        let door = *w.spec().doors.iter().find(|d| d.x == 6 && d.y < 6).unwrap();
        let closed = w.with_door(w.door_index(door.x, door.y).unwrap(), false);
        let home = Pose::new(3, door.y, Heading::WEST);
        let end = Pose::new(8, door.y, Heading::WEST);
        let actions = closed.shortest_actions(home, end, &[]).unwrap();
        let ob = Outbound { home, actions };
        let ep = run_greedy(&closed, &ob, 200);
        assert_eq!(ep.outcome, Outcome::Reached, "{:?}", ep.homerun.iter().map(|r| (r.x, r.y)).collect::<Vec<_>>());
        assert!(ep.step_count > 5);
    }

    #[test]
    fn greedy_respects_the_budget() {
        let w = world(6, 4);
        let door = *w.spec().doors.iter().find(|d| d.x == 6 && d.y < 6).unwrap();
        let home = Pose::new(3, door.y, Heading::WEST);
        let end = Pose::new(8, door.y, Heading::WEST);
        let ob = Outbound { home, actions: w.shortest_actions(home, end, &[]).unwrap() };
        let ep = run_greedy(&w, &ob, 3);
        assert_eq!((ep.outcome, ep.step_count), (Outcome::BudgetExceeded, 3));
    }

    #[test]
    fn ours_falls_back_to_the_traceback_route() {
        // an untrained model with an impossible threshold never takes a shortcut
        let model = WorldModel::new(ModelConfig::micro(), 0).unwrap();
        let w = world(5, 6);
        let home = Pose::new(1, 1, Heading::EAST);
        let end = Pose::new(7, 7, Heading::NORTH);
        let ob = Outbound { home, actions: w.shortest_actions(home, end, &[]).unwrap() };
        let mut cfg = AgentConfig::default();
        cfg.planner.threshold = f64::NEG_INFINITY;
        cfg.planner.samples = 1;
        // one-hot-ish features are not available here, so match views exactly
        cfg.topo.delta_view = 1e-9;
        let ours = run_ours(&w, &model, &ob, Some(2), &cfg).unwrap();
        let tb = run_traceback(&w, &ob, 200);
        assert!(!ours.decision.as_ref().unwrap().shortcut);
        let ours_actions: Vec<Action> = ours.homerun.iter().map(|r| r.action).collect();
        let tb_actions: Vec<Action> = tb.homerun.iter().map(|r| r.action).collect();
        assert_eq!(ours_actions, tb_actions);
        assert_eq!(ours.step_count, tb.step_count);
        assert_eq!(ours.outcome, Outcome::Reached);
    }

    #[test]
    fn ours_returns_from_a_dead_end() {
        // forced gamble straight into a wall: the agent bumps, walks back and
        // takes the known route
        let model = WorldModel::new(ModelConfig::micro(), 0).unwrap();
        let w = world(5, 6);
        let home = Pose::new(1, 1, Heading::EAST);
        let end = Pose::new(2, 3, Heading::SOUTH);
        let ob = Outbound { home, actions: w.shortest_actions(home, end, &[]).unwrap() };
        let mut cfg = AgentConfig::default();
        cfg.planner.threshold = f64::INFINITY;
        cfg.planner.samples = 1;
        cfg.replan = false;
        cfg.topo.delta_view = 1e-9;
        let ours = run_ours(&w, &model, &ob, Some(3), &cfg).unwrap();
        let info = ours.decision.clone().unwrap();
        assert!(info.shortcut);
        let last = ours.homerun.last().unwrap();
        assert_eq!((last.x, last.y, last.heading), (1, 1, 0.0));
        assert_eq!(ours.outcome, Outcome::Reached);
        if info.dead_end {
            let tb = run_traceback(&w, &ob, 200).step_count;
            assert!(ours.step_count > tb);
        }
    }

    #[test]
    fn forced_gamble_costs_twice_its_depth_plus_the_bump() {
        // the door between the lower rooms is closed; the agent faces it from
        // `k + 1` tiles away and is forced straight ahead
        let model = WorldModel::new(ModelConfig::micro(), 0).unwrap();
        let w = world(6, 4);
        let door = *w.spec().doors.iter().find(|d| d.x == 6 && d.y < 6).unwrap();
        let closed = w.with_door(w.door_index(door.x, door.y).unwrap(), false);
        let home = Pose::new(3, door.y, Heading::WEST);
        for k in 0..4 {
            let end = Pose::new(7 + k, door.y, Heading::WEST);
            let before = Pose::new(8 + k, door.y, Heading::WEST);
            let mut actions = closed.shortest_actions(home, before, &[]).unwrap();
            actions.push(Action::Forward);
            assert_eq!(walk(&closed, home, &actions), end);
            let ob = Outbound { home, actions };
            let mut cfg = AgentConfig::default();
            cfg.replan = false;
            cfg.topo.delta_view = 1e-9;
            let ep = run_ours_forced(&closed, &model, &ob, vec![Action::Forward; 5], &cfg).unwrap();
            let tb = run_traceback(&closed, &ob, 200).step_count;
            assert!(ep.decision.as_ref().unwrap().dead_end);
            assert_eq!(ep.outcome, Outcome::Reached);
            // k moves out, one bump, k moves back; the turn-around is shared
            // with the known route
            assert_eq!(ep.step_count, tb + 2 * k as usize + 1, "k = {k}");
            let bumps = ep.homerun.iter().filter(|r| !r.executed).count();
            assert_eq!(bumps, 1);
        }
    }

    #[test]
    fn episode_log_round_trips() {
        let w = world(6, 2);
        use Action::*;
        let ob = Outbound { home: Pose::new(2, 2, Heading::NORTH), actions: vec![Forward, TurnLeft, Forward] };
        let ep = run_traceback(&w, &ob, 200);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.jsonl");
        ep.write_jsonl(&path).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), ep.homerun);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(300))]
        #[test]
        fn greedy_gets_home_in_connected_worlds(seed in 0u64..1_000_000, size in 5usize..=7, closed in 0usize..4, a in 0usize..1000, b in 0usize..1000, ha in 0i32..4, hb in 0i32..4) {
            let w = world(size, seed).with_door(closed, false);
            let tiles = w.walkable_tiles();
            let (ax, ay) = tiles[a % tiles.len()];
            let (bx, by) = tiles[b % tiles.len()];
            let home = Pose::new(ax, ay, Heading::from_quarters(ha));
            let end = Pose::new(bx, by, Heading::from_quarters(hb));
            let ob = Outbound { home, actions: w.shortest_actions(home, end, &[]).unwrap() };
            let ep = run_greedy(&w, &ob, 200);
            proptest::prop_assert_eq!(ep.outcome, Outcome::Reached);
            let last = ep.homerun.last().map(|r| (r.x, r.y)).unwrap_or((bx, by));
            proptest::prop_assert_eq!(last, (ax, ay));
        }
    }
}
