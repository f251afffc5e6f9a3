//! Fits the planner's free constants on held-out worlds.
//!
//! Blocking thresholds come from labelled transitions: forage walks in the
//! calibration worlds are filtered through the model and every Forward is
//! scored by how little the imagined next state differs from the current
//! one, in decoded pixels and in latent space. The shortcut threshold is the
//! midpoint of the mean goal term of open and closed paired scenarios at
//! distance 5.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scenario::{scenarios, WorldEntry};
use super::{HarnessError, Result};
use crate::agents::{score_home, AgentConfig};
use crate::gridworld::{generate_world, Action, Pose};
use crate::harness::dataset::forage;
use crate::planner::{ambiguity_floor, mean_sq_diff, Blocking};
use crate::topomap::cosine_distance;
use crate::worldmodel::{Belief, WorldModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockingFit {
    pub tau: f64,
    /// Balanced accuracy on the calibration transitions.
    pub accuracy: f64,
    pub blocked_median: f64,
    pub moved_median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tau_same: f64,
    pub tau_latent: f64,
    pub threshold: f64,
    pub decoded: BlockingFit,
    pub latent: BlockingFit,
    pub n_blocked: usize,
    pub n_moved: usize,
    pub threshold_d: usize,
    pub blocking: Blocking,
    /// Goal std floor the threshold was fitted under.
    pub goal_std_floor: f64,
    pub open_goal_mean: f64,
    pub closed_goal_mean: f64,
    /// Share of calibration scenarios the threshold classifies correctly.
    #[serde(default)]
    pub decision_accuracy: f64,
    pub n_pairs: usize,
    /// Share of distinct-view pairs closer than the view-cell radius.
    pub view_alias_rate: f64,
}

impl Calibration {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("plain data")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        Ok(serde_json::from_value(v.clone())?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPlan {
    pub worlds: Vec<WorldEntry>,
    /// Forage steps per world for the blocking fit.
    pub steps: usize,
    pub pairs: usize,
    pub d: usize,
    pub seed: u64,
}

/// Threshold with the best balanced accuracy for "blocked iff value < tau".
/// Candidates are midpoints between neighbouring sorted values.
pub fn fit_threshold(blocked: &[f64], moved: &[f64]) -> BlockingFit {
    let mut all: Vec<f64> = blocked.iter().chain(moved).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let score = |tau: f64| {
        let tp = blocked.iter().filter(|v| **v < tau).count() as f64 / blocked.len().max(1) as f64;
        let tn = moved.iter().filter(|v| **v >= tau).count() as f64 / moved.len().max(1) as f64;
        0.5 * (tp + tn)
    };
    let mut best = (f64::MIN_POSITIVE, score(f64::MIN_POSITIVE));
    for w in all.windows(2) {
        let tau = 0.5 * (w[0] + w[1]);
        let s = score(tau);
        if s > best.1 {
            best = (tau, s);
        }
    }
    if let Some(&last) = all.last() {
        let tau = last * 1.5 + f64::MIN_POSITIVE;
        if score(tau) > best.1 {
            best = (tau, score(tau));
        }
    }
    BlockingFit { tau: best.0, accuracy: best.1, blocked_median: median(blocked), moved_median: median(moved) }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

/// Per-Forward change scores: (decoded MSE, latent mean-square, blocked).
pub fn forward_changes(model: &WorldModel<f32>, plan: &CalibrationPlan) -> Result<Vec<(f64, f64, bool)>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0xB10C);
    for entry in &plan.worlds {
        let world = generate_world(&entry.spec()?)?;
        let tiles = world.walkable_tiles();
        let (x, y) = tiles[tiles.len() / 2];
        let mut pose = Pose::new(x, y, crate::gridworld::Heading::EAST);
        let actions = forage(&world, pose, plan.steps, &mut rng);
        let mut belief = model.filter(&Belief::initial(model.config()), None, &world.render_view(&pose));
        for a in actions {
            let (next, blocked) = world.next_pose(pose, a);
            if a == Action::Forward {
                let (prior, _, _) = model.prior(&belief, Some(a));
                let lat = mean_sq_diff64(&prior.mean, &belief.state.mean);
                let dec = mean_sq_diff(&model.decode_one(&prior.mean), &model.decode_one(&belief.state.mean));
                out.push((dec, lat, blocked));
            }
            pose = next;
            belief = model.filter(&belief, Some(a), &world.render_view(&pose));
        }
    }
    Ok(out)
}

fn mean_sq_diff64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Share of pairs of distinct rendered views whose features fall inside
/// `delta` of each other.
pub fn view_alias_rate(model: &WorldModel<f32>, worlds: &[WorldEntry], delta: f64) -> Result<f64> {
    let mut views = Vec::new();
    for entry in worlds {
        let world = generate_world(&entry.spec()?)?;
        for (i, (x, y)) in world.walkable_tiles().into_iter().enumerate() {
            // a spread of poses is enough
            if i % 3 != 0 {
                continue;
            }
            let pose = Pose::new(x, y, crate::gridworld::Heading::from_quarters(i as i32));
            let obs = world.render_view(&pose);
            let bytes = obs.to_rgb_bytes();
            views.push((bytes, model.view_feature(&obs)));
        }
    }
    let (mut close, mut total) = (0usize, 0usize);
    for i in 0..views.len() {
        for j in i + 1..views.len() {
            if views[i].0 == views[j].0 {
                continue;
            }
            total += 1;
            if cosine_distance(&views[i].1, &views[j].1) < delta {
                close += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { close as f64 / total as f64 })
}

/// Runs the whole calibration. `cfg` supplies everything but the fitted
/// constants.
pub fn calibrate(model: &WorldModel<f32>, plan: &CalibrationPlan, cfg: &AgentConfig) -> Result<Calibration> {
    if plan.worlds.is_empty() || plan.pairs == 0 {
        return Err(HarnessError::Config("calibration needs worlds and pairs".into()));
    }
    let changes = forward_changes(model, plan)?;
    let split = |k: usize| -> (Vec<f64>, Vec<f64>) {
        let pick = |b: bool| changes.iter().filter(|c| c.2 == b).map(|c| if k == 0 { c.0 } else { c.1 }).collect();
        (pick(true), pick(false))
    };
    let (db, dm) = split(0);
    let (lb, lm) = split(1);
    if db.is_empty() || dm.is_empty() {
        return Err(HarnessError::Config("calibration walks need both bumps and moves".into()));
    }
    let decoded = fit_threshold(&db, &dm);
    let latent = fit_threshold(&lb, &lm);
    log::info!("blocking fit: decoded tau {:.3e} acc {:.3}, latent tau {:.3e} acc {:.3}", decoded.tau, decoded.accuracy, latent.tau, latent.accuracy);

    let mut agent = cfg.clone();
    agent.planner.tau_same = decoded.tau;
    agent.planner.tau_latent = latent.tau;
    let floor = ambiguity_floor(plan.d, model.config().obs_sigma);
    let (mut open, mut closed) = (Vec::new(), Vec::new());
    for s in scenarios(&plan.worlds, &[plan.d], plan.pairs, plan.seed)? {
        for (is_open, acc) in [(true, &mut open), (false, &mut closed)] {
            let w = s.world(is_open)?;
            let score = score_home(&w, model, &s.outbound, plan.d, &agent).map_err(|e| HarnessError::Config(e.to_string()))?;
            acc.push(score.g - floor);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (om, cm) = (mean(&open), mean(&closed));
    let threshold = 0.5 * (om + cm);
    let right = open.iter().filter(|g| **g < threshold).count() + closed.iter().filter(|g| **g >= threshold).count();
    let decision_accuracy = right as f64 / (open.len() + closed.len()) as f64;
    log::info!("goal term at d={}: open mean {om:.3}, closed mean {cm:.3}, accuracy {decision_accuracy:.3}", plan.d);
    Ok(Calibration {
        tau_same: decoded.tau,
        tau_latent: latent.tau,
        threshold,
        decoded,
        latent,
        n_blocked: db.len(),
        n_moved: dm.len(),
        threshold_d: plan.d,
        blocking: cfg.planner.blocking,
        goal_std_floor: cfg.planner.goal_std_floor,
        open_goal_mean: om,
        closed_goal_mean: cm,
        decision_accuracy,
        n_pairs: open.len(),
        view_alias_rate: view_alias_rate(model, &plan.worlds, cfg.topo.delta_view)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_separates_clean_groups() {
        let fit = fit_threshold(&[0.1, 0.2, 0.3], &[1.0, 2.0]);
        assert!(fit.tau > 0.3 && fit.tau < 1.0);
        assert_eq!(fit.accuracy, 1.0);
    }

    #[test]
    fn threshold_is_balanced_not_majority() {
        // one blocked value among many moves: catching it is worth more than
        // one extra correct move
        let moved: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        let fit = fit_threshold(&[1.5], &moved);
        assert!(fit.tau > 1.5 && fit.tau <= 2.0, "{}", fit.tau);
        assert!((fit.accuracy - (0.5 + 0.5 * 19.0 / 20.0)).abs() < 1e-12);
    }

    #[test]
    fn calibration_round_trips_through_json() {
        let fit = BlockingFit { tau: 1e-3, accuracy: 0.9, blocked_median: 1e-4, moved_median: 1e-2 };
        let c = Calibration {
            tau_same: 1e-3,
            tau_latent: 2e-3,
            threshold: 12.5,
            decoded: fit.clone(),
            latent: fit,
            n_blocked: 10,
            n_moved: 90,
            threshold_d: 5,
            blocking: Blocking::Latent,
            goal_std_floor: 0.5,
            open_goal_mean: 5.0,
            closed_goal_mean: 20.0,
            decision_accuracy: 1.0,
            n_pairs: 8,
            view_alias_rate: 0.01,
        };
        assert_eq!(Calibration::from_json(&c.to_json()).unwrap(), c);
    }
}
