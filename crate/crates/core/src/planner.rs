//! Expected-free-energy scoring of imagined plans.
//!
//! A plan of `H` actions is rolled out `N` times through the learned prior.
//! Each rollout ends in a latent Gaussian and an integrated pose; the plan's
//! EFE is the mean goal divergence to the target node plus the expected
//! observation entropy along the way. Rollout noise is keyed by the action
//! prefix, so all plans are evaluated as one shared tree.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gridworld::{Action, OBS_LEN};
use crate::pose::{pose_kl, PoseBelief};
use crate::topomap::NodeId;
use crate::worldmodel::{frame_entropy, step_noise, Belief, LatentState, WorldModel};

/// Prefixes expanded together; bounds memory on deep trees.
const CHUNK: usize = 96;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PlannerError {
    #[error("horizon {horizon} exceeds the budget of {max}")]
    Budget { horizon: usize, max: usize },
    #[error("need at least one rollout sample")]
    NoSamples,
    #[error("target state has dimension {got}, model latent is {want}")]
    Contract { got: usize, want: usize },
}

pub type Result<T> = std::result::Result<T, PlannerError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoalTerm {
    /// Divergence at the final step only.
    Terminal,
    /// Divergence summed over every imagined step.
    Summed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blocking {
    /// A forward is blocked when the decoded frame barely changes.
    Decoded,
    /// A forward is blocked when the prior mean barely moves.
    Latent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub max_horizon: usize,
    pub samples: usize,
    /// Shortcut threshold on the goal part of G; the horizon's ambiguity
    /// floor is added before comparing.
    pub threshold: f64,
    pub goal_term: GoalTerm,
    pub prune_revisits: bool,
    pub blocking: Blocking,
    /// Decoded-frame MSE below which a forward counts as blocked.
    pub tau_same: f64,
    /// Mean squared latent change below which a forward counts as blocked.
    pub tau_latent: f64,
    pub seed: u64,
    pub pose_sigma_xy: f64,
    pub pose_sigma_deg: f64,
    /// Lower bound on the goal state's std. A location node stands for
    /// every state seen there, not just the sharp posterior of one visit.
    pub goal_std_floor: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            horizon: 5,
            max_horizon: 9,
            samples: 3,
            threshold: 100.0,
            goal_term: GoalTerm::Terminal,
            prune_revisits: false,
            blocking: Blocking::Decoded,
            tau_same: 1e-3,
            tau_latent: 1e-3,
            seed: 0,
            pose_sigma_xy: 0.25,
            pose_sigma_deg: 5.0,
            goal_std_floor: 1.0,
        }
    }
}

/// Where imagination starts.
#[derive(Clone, Debug)]
pub struct Start {
    pub belief: Belief,
    pub pose: PoseBelief,
}

/// `Q(s, p | l)` of a target node.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub state: LatentState,
    pub pose: PoseBelief,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub pose: PoseBelief,
    pub state_kl: f64,
    pub pose_kl: f64,
    pub blocked: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanScore {
    pub actions: Vec<Action>,
    pub samples: Vec<SampleOutcome>,
    /// Mean goal divergence over samples.
    pub goal: f64,
    pub ambiguity: f64,
    pub efe: f64,
    /// Most common predicted end cell, egocentric (right, ahead).
    pub cell: (i32, i32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub horizon: usize,
    pub start: PoseBelief,
    pub plans: Vec<PlanScore>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkScore {
    pub from: NodeId,
    pub to: NodeId,
    pub best: PlanScore,
    pub g: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Decision {
    Shortcut(Vec<Action>),
    Fallback,
}

/// Expected entropy of `h` decoded observations under the fixed-scale
/// likelihood; the same for every plan of that length.
pub fn ambiguity_floor(h: usize, obs_sigma: f64) -> f64 {
    h as f64 * frame_entropy(obs_sigma)
}

/// All `3^h` action sequences in lexicographic action order.
pub fn enumerate_plans(h: usize, max_horizon: usize) -> Result<Vec<Vec<Action>>> {
    if h > max_horizon {
        return Err(PlannerError::Budget { horizon: h, max: max_horizon });
    }
    let mut plans = vec![Vec::new()];
    for _ in 0..h {
        plans = plans
            .into_iter()
            .flat_map(|p| {
                Action::ALL.into_iter().map(move |a| {
                    let mut q = p.clone();
                    q.push(a);
                    q
                })
            })
            .collect();
    }
    Ok(plans)
}

/// Whether the wall-free path of `plan` enters a cell it already left.
pub fn revisits(start: &PoseBelief, plan: &[Action]) -> bool {
    let mut p = *start;
    let mut seen = vec![(p.x.round() as i64, p.y.round() as i64)];
    for &a in plan {
        p = p.integrate(a, false);
        if a == Action::Forward {
            let c = (p.x.round() as i64, p.y.round() as i64);
            if seen.contains(&c) {
                return true;
            }
            seen.push(c);
        }
    }
    false
}

pub fn mean_sq_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64
}

fn mean_sq_diff64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Most frequent cell; ties go to the earliest sample.
fn modal_cell(cells: &[(i32, i32)]) -> (i32, i32) {
    let mut best = cells[0];
    let mut best_n = 0;
    for c in cells {
        let n = cells.iter().filter(|d| *d == c).count();
        if n > best_n {
            best = *c;
            best_n = n;
        }
    }
    best
}

fn cell_of(pose: &PoseBelief, origin: &PoseBelief) -> (i32, i32) {
    let (r, a) = pose.relative_to(origin);
    (r.round() as i32, a.round() as i32)
}

/// One tree level: `prefixes.len() * n` rollout states, sample-minor.
struct Level {
    prefixes: Vec<Vec<Action>>,
    sample: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
    h: Vec<f64>,
    c: Vec<f64>,
    /// Decoded prior means, filled on demand.
    frames: Option<Vec<Vec<f32>>>,
    pose: Vec<PoseBelief>,
    blocked: Vec<Vec<bool>>,
    /// Goal divergence accumulated along the path (summed mode).
    acc: Vec<f64>,
}

impl Level {
    fn slice(&self, lo: usize, hi: usize, n: usize) -> Level {
        let l = self.mean.len() / self.pose.len();
        let hd = self.h.len() / self.pose.len();
        let (a, b) = (lo * n, hi * n);
        Level {
            prefixes: self.prefixes[lo..hi].to_vec(),
            sample: self.sample[a * l..b * l].to_vec(),
            mean: self.mean[a * l..b * l].to_vec(),
            std: self.std[a * l..b * l].to_vec(),
            h: self.h[a * hd..b * hd].to_vec(),
            c: self.c[a * hd..b * hd].to_vec(),
            frames: self.frames.as_ref().map(|f| f[a..b].to_vec()),
            pose: self.pose[a..b].to_vec(),
            blocked: self.blocked[a..b].to_vec(),
            acc: self.acc[a..b].to_vec(),
        }
    }
}

struct Evaluator<'a> {
    model: &'a WorldModel<f32>,
    target: &'a Target,
    cfg: &'a PlannerConfig,
    horizon: usize,
    start_pose: PoseBelief,
    n: usize,
    out: Vec<PlanScore>,
}

impl Evaluator<'_> {
    fn goal(&self, mean: &[f64], std: &[f64], pose: &PoseBelief) -> (f64, f64) {
        let s = LatentState { mean: mean.to_vec(), std: std.to_vec() };
        let skl = s.kl(&self.target.state);
        let pkl = pose_kl(pose, &self.target.pose, self.cfg.pose_sigma_xy, self.cfg.pose_sigma_deg);
        (skl, pkl)
    }

    fn ensure_frames(&self, level: &mut Level) {
        if level.frames.is_none() && self.cfg.blocking == Blocking::Decoded {
            level.frames = Some(self.model.decode_batch(&level.mean));
        }
    }

    fn finish(&mut self, level: &Level) {
        let l = self.model.latent_dim();
        let amb = ambiguity_floor(self.horizon, self.model.config().obs_sigma);
        for (p, prefix) in level.prefixes.iter().enumerate() {
            let mut samples = Vec::with_capacity(self.n);
            let mut goal = 0.0;
            for i in 0..self.n {
                let k = p * self.n + i;
                let (skl, pkl) = self.goal(&level.mean[k * l..(k + 1) * l], &level.std[k * l..(k + 1) * l], &level.pose[k]);
                goal += match self.cfg.goal_term {
                    GoalTerm::Terminal => skl + pkl,
                    GoalTerm::Summed if self.horizon == 0 => skl + pkl,
                    GoalTerm::Summed => level.acc[k],
                };
                samples.push(SampleOutcome { pose: level.pose[k], state_kl: skl, pose_kl: pkl, blocked: level.blocked[k].clone() });
            }
            goal /= self.n as f64;
            let cells: Vec<(i32, i32)> = samples.iter().map(|s| cell_of(&s.pose, &self.start_pose)).collect();
            self.out.push(PlanScore {
                actions: prefix.clone(),
                cell: modal_cell(&cells),
                samples,
                goal,
                ambiguity: amb,
                efe: goal + amb,
            });
        }
    }

    fn expand(&mut self, mut level: Level, depth: usize) {
        if depth == self.horizon {
            self.finish(&level);
            return;
        }
        let np = level.prefixes.len();
        if np > CHUNK {
            for lo in (0..np).step_by(CHUNK) {
                let part = level.slice(lo, (lo + CHUNK).min(np), self.n);
                self.expand(part, depth);
            }
            return;
        }
        self.ensure_frames(&mut level);
        let (n, l) = (self.n, self.model.latent_dim());
        let hd = self.model.config().hidden;
        // children: parent-major, then action, then sample
        let mut parents = Vec::new();
        let mut prefixes = Vec::new();
        let mut acts = Vec::new();
        for (p, prefix) in level.prefixes.iter().enumerate() {
            for a in Action::ALL {
                let mut child = prefix.clone();
                child.push(a);
                if self.cfg.prune_revisits && revisits(&self.start_pose, &child) {
                    continue;
                }
                for i in 0..n {
                    parents.push(p * n + i);
                    acts.push(Some(a));
                }
                prefixes.push(child);
            }
        }
        if prefixes.is_empty() {
            return;
        }
        let m = parents.len();
        let gather = |src: &[f64], w: usize| -> Vec<f64> {
            let mut v = Vec::with_capacity(m * w);
            for &k in &parents {
                v.extend_from_slice(&src[k * w..(k + 1) * w]);
            }
            v
        };
        let out = self.model.prior_batch(&gather(&level.sample, l), &acts, &gather(&level.h, hd), &gather(&level.c, hd));
        let mut sample = Vec::with_capacity(m * l);
        for (j, prefix) in prefixes.iter().enumerate() {
            for i in 0..n {
                let k = j * n + i;
                let eps = step_noise(self.cfg.seed, i, prefix, l);
                sample.extend((0..l).map(|d| out.mean[k * l + d] + out.std[k * l + d] * eps[d]));
            }
        }
        // blocked forwards
        let fwd: Vec<usize> = (0..m).filter(|&k| acts[k] == Some(Action::Forward)).collect();
        let mut blocked_now = vec![false; m];
        let mut frames: Option<Vec<Vec<f32>>> = None;
        match self.cfg.blocking {
            Blocking::Decoded => {
                let mut fr = vec![Vec::new(); m];
                let means: Vec<f64> = fwd.iter().flat_map(|&k| out.mean[k * l..(k + 1) * l].iter().copied()).collect();
                let decoded = if means.is_empty() { Vec::new() } else { self.model.decode_batch(&means) };
                let parent_frames = level.frames.as_ref().expect("parent frames decoded");
                for (&k, f) in fwd.iter().zip(decoded) {
                    blocked_now[k] = mean_sq_diff(&f, &parent_frames[parents[k]]) < self.cfg.tau_same;
                    fr[k] = f;
                }
                // turn children get decoded later if they need to be parents
                if fwd.len() == m {
                    frames = Some(fr);
                } else if depth + 1 < self.horizon {
                    let rest: Vec<usize> = (0..m).filter(|k| fr[*k].is_empty()).collect();
                    let means: Vec<f64> = rest.iter().flat_map(|&k| out.mean[k * l..(k + 1) * l].iter().copied()).collect();
                    for (k, f) in rest.into_iter().zip(self.model.decode_batch(&means)) {
                        fr[k] = f;
                    }
                    frames = Some(fr);
                }
            }
            Blocking::Latent => {
                for &k in &fwd {
                    let pk = parents[k];
                    blocked_now[k] = mean_sq_diff64(&out.mean[k * l..(k + 1) * l], &level.mean[pk * l..(pk + 1) * l]) < self.cfg.tau_latent;
                }
            }
        }
        let mut pose = Vec::with_capacity(m);
        let mut blocked = Vec::with_capacity(m);
        let mut acc = Vec::with_capacity(m);
        for k in 0..m {
            let pk = parents[k];
            let a = acts[k].expect("imagined steps have actions");
            let p = level.pose[pk].integrate(a, blocked_now[k]);
            let mut b = level.blocked[pk].clone();
            b.push(blocked_now[k]);
            let extra = if self.cfg.goal_term == GoalTerm::Summed {
                let (s, q) = self.goal(&out.mean[k * l..(k + 1) * l], &out.std[k * l..(k + 1) * l], &p);
                s + q
            } else {
                0.0
            };
            acc.push(level.acc[pk] + extra);
            pose.push(p);
            blocked.push(b);
        }
        let child = Level { prefixes, sample, mean: out.mean, std: out.std, h: out.h, c: out.c, frames, pose, blocked, acc };
        drop(level);
        self.expand(child, depth + 1);
    }
}

/// Scores every plan of length `h` from `start` towards `target`.
pub fn evaluate(model: &WorldModel<f32>, start: &Start, target: &Target, h: usize, cfg: &PlannerConfig) -> Result<Evaluation> {
    if h > cfg.max_horizon {
        return Err(PlannerError::Budget { horizon: h, max: cfg.max_horizon });
    }
    if cfg.samples == 0 {
        return Err(PlannerError::NoSamples);
    }
    let l = model.latent_dim();
    if target.state.dim() != l || start.belief.state.dim() != l {
        return Err(PlannerError::Contract { got: target.state.dim(), want: l });
    }
    let mut target = target.clone();
    for s in &mut target.state.std {
        *s = s.max(cfg.goal_std_floor);
    }
    let target = &target;
    let n = cfg.samples;
    let rep = |v: &[f64]| -> Vec<f64> { (0..n).flat_map(|_| v.iter().copied()).collect() };
    let b = &start.belief;
    let root = Level {
        prefixes: vec![Vec::new()],
        sample: rep(&b.sample),
        mean: rep(&b.state.mean),
        std: rep(&b.state.std),
        h: rep(&b.h),
        c: rep(&b.c),
        frames: None,
        pose: vec![start.pose; n],
        blocked: vec![Vec::new(); n],
        acc: vec![0.0; n],
    };
    let mut ev = Evaluator { model, target, cfg, horizon: h, start_pose: start.pose, n, out: Vec::new() };
    ev.expand(root, 0);
    Ok(Evaluation { horizon: h, start: start.pose, plans: ev.out })
}

impl Evaluation {
    /// Lowest-EFE plan; ties go to the first in enumeration order.
    pub fn best(&self) -> &PlanScore {
        let mut best = &self.plans[0];
        for p in &self.plans[1..] {
            if p.efe < best.efe {
                best = p;
            }
        }
        best
    }

    pub fn field(&self) -> EfeField {
        let mut cells: BTreeMap<(i32, i32), f64> = BTreeMap::new();
        for p in &self.plans {
            let e = cells.entry(p.cell).or_insert(f64::INFINITY);
            *e = e.min(p.efe);
        }
        EfeField { horizon: self.horizon, cells }
    }
}

pub fn score_link(
    model: &WorldModel<f32>,
    from: NodeId,
    start: &Start,
    to: NodeId,
    target: &Target,
    h: usize,
    cfg: &PlannerConfig,
) -> Result<LinkScore> {
    let ev = evaluate(model, start, target, h, cfg)?;
    let best = ev.best().clone();
    Ok(LinkScore { from, to, g: best.efe, best })
}

/// Threshold on G for horizon `h`: the configured goal threshold plus the
/// constant ambiguity every `h`-step plan pays.
pub fn effective_threshold(cfg: &PlannerConfig, h: usize, obs_sigma: f64) -> f64 {
    cfg.threshold + ambiguity_floor(h, obs_sigma)
}

/// Shortcut iff `G < threshold`.
pub fn decide_shortcut(score: &LinkScore, threshold: f64) -> Decision {
    if score.g < threshold {
        Decision::Shortcut(score.best.actions.clone())
    } else {
        Decision::Fallback
    }
}

/// Minimum EFE per predicted end cell, egocentric (right, ahead).
#[derive(Clone, Debug, PartialEq)]
pub struct EfeField {
    pub horizon: usize,
    pub cells: BTreeMap<(i32, i32), f64>,
}

impl EfeField {
    /// Cell with the lowest value; ties go to the smallest key.
    pub fn argmin(&self) -> Option<(i32, i32)> {
        let mut best: Option<((i32, i32), f64)> = None;
        for (&c, &g) in &self.cells {
            if best.map_or(true, |(_, b)| g < b) {
                best = Some((c, g));
            }
        }
        best.map(|(c, _)| c)
    }

    pub fn write_csv(&self, path: &Path) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["dx", "dy", "G"])?;
        for (&(dx, dy), g) in &self.cells {
            w.write_record([dx.to_string(), dy.to_string(), g.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> std::result::Result<BTreeMap<(i32, i32), f64>, csv::Error> {
        let mut r = csv::Reader::from_path(path)?;
        let mut cells = BTreeMap::new();
        for row in r.deserialize::<(i32, i32, f64)>() {
            let (dx, dy, g) = row?;
            cells.insert((dx, dy), g);
        }
        Ok(cells)
    }

    /// Heat grid, ahead pointing up; low EFE is dark, unreachable cells grey.
    pub fn save_png(&self, path: &Path) -> image::ImageResult<()> {
        const PX: u32 = 24;
        let h = self.horizon as i32;
        let side = (2 * h + 1) as u32;
        let (lo, hi) = self.cells.values().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &g| (a.min(g), b.max(g)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut img = image::RgbImage::from_pixel(side * PX, side * PX, image::Rgb([128, 128, 128]));
        for (&(dx, dy), &g) in &self.cells {
            let t = ((g - lo) / span).clamp(0.0, 1.0);
            let rgb = heat(t);
            let (cx, cy) = ((dx + h) as u32, (h - dy) as u32);
            for y in 0..PX {
                for x in 0..PX {
                    let border = x == 0 || y == 0;
                    let px = if border { [40, 40, 40] } else { rgb };
                    img.put_pixel(cx * PX + x, cy * PX + y, image::Rgb(px));
                }
            }
        }
        img.save(path)
    }
}

/// Dark purple through orange to pale yellow.
fn heat(t: f64) -> [u8; 3] {
    let stops = [[20.0, 10.0, 60.0], [180.0, 50.0, 90.0], [250.0, 150.0, 40.0], [252.0, 250.0, 190.0]];
    let x = t * (stops.len() - 1) as f64;
    let i = (x.floor() as usize).min(stops.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (stops[i][c] * (1.0 - f) + stops[i + 1][c] * f).round() as u8;
    }
    out
}

/// Frames of decoded prior means along each of `n` rollouts of `plan`,
/// sharing the planner's noise.
pub fn rollout_frames(model: &WorldModel<f32>, start: &Belief, plan: &[Action], n: usize, seed: u64) -> Vec<Vec<Vec<f32>>> {
    model.imagine(start, plan, n, seed).into_iter().map(|r| r.frames).collect()
}

/// Tiles `frames` (rows of equally long strips) into one RGB image.
pub fn save_strip(rows: &[Vec<Vec<f32>>], path: &Path) -> image::ImageResult<()> {
    use crate::gridworld::OBS_SIDE;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0).max(1) as u32;
    let side = OBS_SIDE as u32;
    let gap = 2;
    let w = cols * (side + gap);
    let h = rows.len().max(1) as u32 * (side + gap);
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    let plane = OBS_SIDE * OBS_SIDE;
    for (r, row) in rows.iter().enumerate() {
        for (c, f) in row.iter().enumerate() {
            debug_assert_eq!(f.len(), OBS_LEN);
            for y in 0..OBS_SIDE {
                for x in 0..OBS_SIDE {
                    let px: [u8; 3] = std::array::from_fn(|ch| (f[ch * plane + y * OBS_SIDE + x].clamp(0.0, 1.0) * 255.0).round() as u8);
                    img.put_pixel(c as u32 * (side + gap) + x as u32, r as u32 * (side + gap) + y as u32, image::Rgb(px));
                }
            }
        }
    }
    img.save(path)
}
