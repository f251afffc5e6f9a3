//! Experiment configuration: one TOML file plus `key=value` overrides.
//!
//! ```toml
//! seed = 0
//! checkpoint = "models/tiny.hrck"
//! out_dir = "runs/table1"
//!
//! [scenarios]
//! distances = [5, 6, 7, 9]
//! pairs = 15
//!
//! [agent]
//! budget = 200
//!
//! [efe]
//! samples = 3
//! goal_term = "terminal"
//! ```
//!
//! Every key is optional. `efe.threshold`, `efe.tau_same` and
//! `efe.tau_latent` default to the checkpoint's calibration when it has one.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::calibrate::Calibration;
use super::scenario::{WorldEntry, TEST_WORLDS};
use super::{HarnessError, Result};
use crate::agents::AgentConfig;
use crate::planner::{Blocking, GoalTerm, PlannerConfig};
use crate::topomap::TopoConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub distances: Vec<usize>,
    /// Open/closed pairs per distance.
    pub pairs: usize,
    pub worlds: Vec<WorldEntry>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection { distances: vec![5, 6, 7, 9], pairs: 15, worlds: TEST_WORLDS.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSection {
    pub budget: usize,
    pub replan: bool,
    pub home_radius: f64,
}

impl Default for AgentSection {
    fn default() -> Self {
        let a = AgentConfig::default();
        AgentSection { budget: a.budget, replan: a.replan, home_radius: a.home_radius }
    }
}

/// Planner keys; unset ones fall back to calibration, then to defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EfeSection {
    pub horizon: Option<usize>,
    pub max_horizon: Option<usize>,
    pub samples: Option<usize>,
    pub threshold: Option<f64>,
    pub goal_term: Option<GoalTerm>,
    pub prune_revisits: Option<bool>,
    pub blocking: Option<Blocking>,
    pub tau_same: Option<f64>,
    pub tau_latent: Option<f64>,
    pub seed: Option<u64>,
    pub pose_sigma_xy: Option<f64>,
    pub pose_sigma_deg: Option<f64>,
    pub goal_std_floor: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FigureSection {
    /// Index into the scenarios at distance `d`.
    pub scenario: usize,
    pub d: usize,
    /// Frames per rollout strip come from the horizon; this many strips.
    pub strips: usize,
}

impl Default for FigureSection {
    fn default() -> Self {
        FigureSection { scenario: 0, d: 5, strips: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
    /// Worker threads for independent episodes; 0 picks the core count.
    pub threads: usize,
    pub scenarios: ScenarioSection,
    pub agent: AgentSection,
    pub efe: EfeSection,
    pub topo: TopoConfig,
    pub figures: FigureSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            checkpoint: PathBuf::from("models/tiny.hrck"),
            out_dir: PathBuf::from("runs/table1"),
            threads: 0,
            scenarios: ScenarioSection::default(),
            agent: AgentSection::default(),
            efe: EfeSection::default(),
            topo: TopoConfig::default(),
            figures: FigureSection::default(),
        }
    }
}

/// Sets `key` (dotted path) in `table`. The value is read as TOML and
/// taken as a bare string when it does not parse.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(HarnessError::Config(format!("bad override key `{key}`")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` if given, then applies the overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenarios.worlds.is_empty() {
            return Err(HarnessError::Config("scenarios.worlds is empty".into()));
        }
        if self.scenarios.distances.iter().any(|&d| d == 0) {
            return Err(HarnessError::Config("distances must be positive".into()));
        }
        if self.efe.samples == Some(0) {
            return Err(HarnessError::Config("efe.samples must be at least 1".into()));
        }
        let max = self.efe.max_horizon.unwrap_or(PlannerConfig::default().max_horizon);
        if let Some(&d) = self.scenarios.distances.iter().find(|&&d| d > max) {
            return Err(HarnessError::Config(format!("distance {d} exceeds efe.max_horizon {max}")));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Planner settings: explicit keys, then calibration, then defaults.
    pub fn planner(&self, calibration: Option<&Calibration>) -> PlannerConfig {
        let mut p = PlannerConfig::default();
        if let Some(c) = calibration {
            p.threshold = c.threshold;
            p.tau_same = c.tau_same;
            p.tau_latent = c.tau_latent;
            p.blocking = c.blocking;
            p.goal_std_floor = c.goal_std_floor;
        }
        let e = &self.efe;
        p.horizon = e.horizon.unwrap_or(p.horizon);
        p.max_horizon = e.max_horizon.unwrap_or(p.max_horizon);
        p.samples = e.samples.unwrap_or(p.samples);
        p.threshold = e.threshold.unwrap_or(p.threshold);
        p.goal_term = e.goal_term.unwrap_or(p.goal_term);
        p.prune_revisits = e.prune_revisits.unwrap_or(p.prune_revisits);
        p.blocking = e.blocking.unwrap_or(p.blocking);
        p.tau_same = e.tau_same.unwrap_or(p.tau_same);
        p.tau_latent = e.tau_latent.unwrap_or(p.tau_latent);
        p.seed = e.seed.unwrap_or(self.seed);
        p.pose_sigma_xy = e.pose_sigma_xy.unwrap_or(p.pose_sigma_xy);
        p.pose_sigma_deg = e.pose_sigma_deg.unwrap_or(p.pose_sigma_deg);
        p.goal_std_floor = e.goal_std_floor.unwrap_or(p.goal_std_floor);
        p
    }

    pub fn agent(&self, calibration: Option<&Calibration>) -> AgentConfig {
        AgentConfig {
            budget: self.agent.budget,
            planner: self.planner(calibration),
            topo: self.topo.clone(),
            replan: self.agent.replan,
            home_radius: self.agent.home_radius,
        }
    }

    pub fn threads(&self) -> usize {
        if self.threads > 0 {
            self.threads
        } else {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        }
    }
}
