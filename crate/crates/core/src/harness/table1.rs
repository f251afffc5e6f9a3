//! Home-run comparison: every agent on every scenario, door open and closed.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::calibrate::Calibration;
use super::config::ExperimentConfig;
use super::scenario::{scenarios, Scenario};
use super::{HarnessError, Result};
use crate::agents::{run_greedy, run_ours, run_traceback, AgentConfig, AgentKind, Episode, Outcome};
use crate::worldmodel::{load_checkpoint, WorldModel};

/// One executed home run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub scenario: String,
    pub d: usize,
    pub door: String,
    pub agent: String,
    pub steps: usize,
    pub outcome: String,
    pub outbound: usize,
    pub shortcut: Option<bool>,
    pub dead_end: Option<bool>,
    pub g: Option<f64>,
    pub threshold: Option<f64>,
}

/// Mean steps for one (d, agent, door) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub d: usize,
    pub agent: String,
    pub door: String,
    pub mean_steps: f64,
    pub n: usize,
    pub reached: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionStats {
    pub d: usize,
    /// Shortcut taken with the door open or declined with it closed.
    pub accuracy: f64,
    /// Share of runs (both door states) where a shortcut was tried.
    pub shortcut_rate: f64,
    pub n: usize,
}

#[derive(Clone, Debug)]
pub struct Table1 {
    pub scenarios: Vec<Scenario>,
    pub episodes: Vec<Episode>,
    pub rows: Vec<EpisodeRow>,
    pub summary: Vec<SummaryRow>,
    pub decisions: Vec<DecisionStats>,
}

fn door_name(open: bool) -> &'static str {
    if open {
        "open"
    } else {
        "closed"
    }
}

fn outcome_name(o: Outcome) -> &'static str {
    match o {
        Outcome::Reached => "reached",
        Outcome::BudgetExceeded => "budget_exceeded",
        Outcome::Stranded => "stranded",
    }
}

impl Table1 {
    pub fn cell(&self, d: usize, agent: AgentKind, open: bool) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.d == d && r.agent == agent.name() && r.door == door_name(open))
    }

    pub fn decision(&self, d: usize) -> Option<&DecisionStats> {
        self.decisions.iter().find(|s| s.d == d)
    }

    /// Episodes of `agent` at distance `d`, paired as (open, closed) per scenario.
    pub fn pairs(&self, d: usize, agent: AgentKind) -> Vec<(&Episode, &Episode)> {
        let mut out = Vec::new();
        for (i, s) in self.scenarios.iter().enumerate() {
            if s.d != d {
                continue;
            }
            let k = AgentKind::ALL.iter().position(|a| *a == agent).expect("known agent");
            let base = i * 2 * AgentKind::ALL.len();
            out.push((&self.episodes[base + k], &self.episodes[base + AgentKind::ALL.len() + k]));
        }
        out
    }
}

struct Job {
    scenario: usize,
    open: bool,
    agent: AgentKind,
}

fn run_one(s: &Scenario, open: bool, agent: AgentKind, model: &WorldModel<f32>, cfg: &AgentConfig) -> Result<Episode> {
    let world = s.world(open)?;
    Ok(match agent {
        AgentKind::Greedy => run_greedy(&world, &s.outbound, cfg.budget),
        AgentKind::TraceBack => run_traceback(&world, &s.outbound, cfg.budget),
        AgentKind::Ours => run_ours(&world, model, &s.outbound, Some(s.d), cfg).map_err(|e| HarnessError::Config(e.to_string()))?,
    })
}

/// Runs `jobs` on `threads` workers; results keep job order.
fn run_jobs(jobs: &[Job], scen: &[Scenario], model: &WorldModel<f32>, cfg: &AgentConfig, threads: usize) -> Result<Vec<Episode>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Episode>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.max(1).min(jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let r = run_one(&scen[job.scenario], job.open, job.agent, model, cfg);
                log::debug!("{} {} {}: {:?}", scen[job.scenario].id, door_name(job.open), job.agent.name(), r.as_ref().map(|e| e.step_count));
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Runs every agent on every scenario.
pub fn run_table1(cfg: &ExperimentConfig, model: &WorldModel<f32>, calibration: Option<&Calibration>) -> Result<Table1> {
    let scen = scenarios(&cfg.scenarios.worlds, &cfg.scenarios.distances, cfg.scenarios.pairs, cfg.seed)?;
    let agent_cfg = cfg.agent(calibration);
    let mut jobs = Vec::new();
    for i in 0..scen.len() {
        for open in [true, false] {
            for agent in AgentKind::ALL {
                jobs.push(Job { scenario: i, open, agent });
            }
        }
    }
    let episodes = run_jobs(&jobs, &scen, model, &agent_cfg, cfg.threads())?;
    let rows: Vec<EpisodeRow> = jobs
        .iter()
        .zip(&episodes)
        .map(|(j, e)| {
            let s = &scen[j.scenario];
            EpisodeRow {
                scenario: s.id.clone(),
                d: s.d,
                door: door_name(j.open).into(),
                agent: j.agent.name().into(),
                steps: e.step_count,
                outcome: outcome_name(e.outcome).into(),
                outbound: s.outbound.actions.len(),
                shortcut: e.decision.as_ref().map(|d| d.shortcut),
                dead_end: e.decision.as_ref().map(|d| d.dead_end),
                g: e.decision.as_ref().map(|d| d.g),
                threshold: e.decision.as_ref().map(|d| d.threshold),
            }
        })
        .collect();
    let mut summary = Vec::new();
    let mut decisions = Vec::new();
    for &d in &cfg.scenarios.distances {
        for agent in AgentKind::ALL {
            for open in [true, false] {
                let cell: Vec<&EpisodeRow> = rows.iter().filter(|r| r.d == d && r.agent == agent.name() && r.door == door_name(open)).collect();
                let n = cell.len();
                summary.push(SummaryRow {
                    d,
                    agent: agent.name().into(),
                    door: door_name(open).into(),
                    mean_steps: cell.iter().map(|r| r.steps as f64).sum::<f64>() / n.max(1) as f64,
                    n,
                    reached: cell.iter().filter(|r| r.outcome == "reached").count(),
                });
            }
        }
        let ours: Vec<&EpisodeRow> = rows.iter().filter(|r| r.d == d && r.agent == AgentKind::Ours.name()).collect();
        let n = ours.len();
        let correct = ours.iter().filter(|r| r.shortcut == Some(r.door == "open")).count();
        let shortcuts = ours.iter().filter(|r| r.shortcut == Some(true)).count();
        decisions.push(DecisionStats {
            d,
            accuracy: correct as f64 / n.max(1) as f64,
            shortcut_rate: shortcuts as f64 / n.max(1) as f64,
            n,
        });
    }
    Ok(Table1 { scenarios: scen, episodes, rows, summary, decisions })
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// `git describe` of the working tree, or "unknown" outside a repository.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub config_hash: String,
    pub checkpoint_hash: String,
    pub git_describe: String,
    pub config: ExperimentConfig,
    pub calibration: Option<Calibration>,
    pub files: Vec<String>,
}

/// Writes the manifest last; its presence marks a complete run.
pub fn write_manifest(dir: &Path, kind: &str, cfg: &ExperimentConfig, calibration: Option<&Calibration>, files: Vec<String>) -> Result<PathBuf> {
    let checkpoint_hash = if cfg.checkpoint.exists() { sha256_file(&cfg.checkpoint)? } else { String::new() };
    let m = Manifest {
        kind: kind.into(),
        config_hash: cfg.hash(),
        checkpoint_hash,
        git_describe: git_describe(),
        config: cfg.clone(),
        calibration: calibration.cloned(),
        files,
    };
    let path = dir.join("manifest.json");
    let tmp = dir.join("manifest.json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(&m)?)?;
    std::fs::rename(&tmp, &path)?;
    Ok(path)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?)
}

#[derive(Serialize)]
struct Summary<'a> {
    decisions: &'a [DecisionStats],
    /// Share of shortcut attempts at the largest distance.
    gamble_rate: Option<f64>,
    gamble_d: Option<usize>,
}

/// Writes `table1.csv`, `episodes.csv`, `summary.json`, per-episode logs
/// and the config, then the manifest.
pub fn write_table1(dir: &Path, t: &Table1, cfg: &ExperimentConfig, calibration: Option<&Calibration>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("episodes"))?;
    let _ = std::fs::remove_file(dir.join("manifest.json"));
    let mut files = vec!["config.toml".to_string(), "table1.csv".into(), "episodes.csv".into(), "summary.json".into()];
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    write_csv(&dir.join("table1.csv"), &t.summary)?;
    write_csv(&dir.join("episodes.csv"), &t.rows)?;
    let gamble_d = t.decisions.iter().map(|s| s.d).max();
    let summary = Summary {
        decisions: &t.decisions,
        gamble_rate: gamble_d.and_then(|d| t.decision(d)).map(|s| s.shortcut_rate),
        gamble_d,
    };
    std::fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    for (row, ep) in t.rows.iter().zip(&t.episodes) {
        let name = format!("episodes/{}-{}-{}.jsonl", row.scenario, row.door, row.agent);
        ep.write_jsonl(&dir.join(&name))?;
        files.push(name);
    }
    write_manifest(dir, "table1", cfg, calibration, files)
}

/// Loads the configured checkpoint and its calibration.
pub fn load_model(cfg: &ExperimentConfig) -> Result<(WorldModel<f32>, Option<Calibration>)> {
    if !cfg.checkpoint.exists() {
        return Err(HarnessError::Config(format!("checkpoint {} not found", cfg.checkpoint.display())));
    }
    let (model, meta) = load_checkpoint(&cfg.checkpoint)?;
    let calibration = meta.calibration.as_ref().map(Calibration::from_json).transpose()?;
    Ok((model, calibration))
}
