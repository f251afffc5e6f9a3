//! EFE fields and imagined rollouts for one scenario, door open and closed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::calibrate::Calibration;
use super::config::ExperimentConfig;
use super::scenario::{direct_cost, scenarios, Scenario};
use super::table1::{write_csv, write_manifest};
use super::{HarnessError, Result};
use crate::agents::home_problem;
use crate::gridworld::format_actions;
use crate::planner::{evaluate, mean_sq_diff, rollout_frames, save_strip, EfeField, Evaluation};
use crate::worldmodel::WorldModel;

#[derive(Clone, Debug)]
pub struct Panel {
    pub open: bool,
    pub evaluation: Evaluation,
    pub field: EfeField,
    pub rollouts: Vec<Vec<Vec<f32>>>,
}

#[derive(Clone, Debug)]
pub struct Figures {
    pub scenario: Scenario,
    /// Home in the egocentric frame of the end pose: (right, ahead).
    pub goal_cell: (i32, i32),
    pub panels: Vec<Panel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRow {
    pub door: String,
    pub sample: usize,
    pub step: usize,
    pub action: String,
    /// Pixel MSE to the previous imagined frame.
    pub change: f64,
}

/// The `index`-th scenario at distance `d` in which the agent ends facing
/// home, as in the classic door-ahead setup.
pub fn facing_scenario(cfg: &ExperimentConfig, d: usize, index: usize) -> Result<Scenario> {
    let pool = scenarios(&cfg.scenarios.worlds, &[d], 16 * (index + 1), cfg.seed)?;
    let facing: Vec<Scenario> = pool
        .into_iter()
        .filter(|s| {
            let h = s.outbound.home;
            let ahead = crate::gridworld::Heading::from_delta((h.x - s.end.x).signum(), (h.y - s.end.y).signum());
            ahead == Some(s.end.heading) && direct_cost(s) == d
        })
        .collect();
    facing
        .into_iter()
        .nth(index)
        .ok_or_else(|| HarnessError::Config(format!("no door-ahead scenario #{index} at distance {d}")))
}

/// Computes both panels without writing anything.
pub fn compute_figures(cfg: &ExperimentConfig, model: &WorldModel<f32>, calibration: Option<&Calibration>) -> Result<Figures> {
    let d = cfg.figures.d;
    let scenario = facing_scenario(cfg, d, cfg.figures.scenario)?;
    let agent = cfg.agent(calibration);
    let mut panels = Vec::new();
    for open in [true, false] {
        let world = scenario.world(open)?;
        let (start, target) = home_problem(&world, model, &scenario.outbound, &agent);
        let evaluation = evaluate(model, &start, &target, d, &agent.planner).map_err(|e| HarnessError::Config(e.to_string()))?;
        let field = evaluation.field();
        let rollouts = rollout_frames(model, &start.belief, &evaluation.best().actions, cfg.figures.strips, agent.planner.seed);
        panels.push(Panel { open, evaluation, field, rollouts });
    }
    let home = crate::pose::PoseBelief::at(scenario.outbound.home);
    let (r, a) = home.relative_to(&crate::pose::PoseBelief::at(scenario.end));
    Ok(Figures { goal_cell: (r.round() as i32, a.round() as i32), scenario, panels })
}

/// Writes `efe_{open,closed}.{csv,png}`, `rollouts_{open,closed}.png`,
/// `rollouts.csv` and the manifest into `dir`.
pub fn render_figures(dir: &Path, cfg: &ExperimentConfig, model: &WorldModel<f32>, calibration: Option<&Calibration>) -> Result<Figures> {
    std::fs::create_dir_all(dir)?;
    let _ = std::fs::remove_file(dir.join("manifest.json"));
    let figs = compute_figures(cfg, model, calibration)?;
    let mut files = vec!["config.toml".to_string(), "rollouts.csv".into()];
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let mut rows = Vec::new();
    let img = |e: image::ImageError| HarnessError::Format(e.to_string());
    for p in &figs.panels {
        let door = if p.open { "open" } else { "closed" };
        p.field.write_csv(&dir.join(format!("efe_{door}.csv")))?;
        p.field.save_png(&dir.join(format!("efe_{door}.png"))).map_err(img)?;
        save_strip(&p.rollouts, &dir.join(format!("rollouts_{door}.png"))).map_err(img)?;
        files.extend([format!("efe_{door}.csv"), format!("efe_{door}.png"), format!("rollouts_{door}.png")]);
        let plan = &p.evaluation.best().actions;
        for (i, frames) in p.rollouts.iter().enumerate() {
            for (k, f) in frames.iter().enumerate() {
                let change = if k == 0 { 0.0 } else { mean_sq_diff(f, &frames[k - 1]) };
                rows.push(RolloutRow {
                    door: door.into(),
                    sample: i,
                    step: k + 1,
                    action: plan.get(k).map(|a| format_actions(&[*a])).unwrap_or_default(),
                    change,
                });
            }
        }
    }
    write_csv(&dir.join("rollouts.csv"), &rows)?;
    std::fs::write(
        dir.join("scenario.json"),
        serde_json::to_vec_pretty(&serde_json::json!({ "scenario": figs.scenario, "goal_cell": figs.goal_cell }))?,
    )?;
    files.push("scenario.json".into());
    write_manifest(dir, "figures", cfg, calibration, files)?;
    Ok(figs)
}
