use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use homerun::agents::{explore_map, run_greedy, run_ours, run_traceback, AgentKind, Outbound, Outcome};
use homerun::gridworld::{generate_world, Heading, Pose};
use homerun::harness::calibrate::{calibrate, CalibrationPlan};
use homerun::harness::config::ExperimentConfig;
use homerun::harness::dataset::{collect, forage, CollectPolicy, Dataset};
use homerun::harness::figures::render_figures;
use homerun::harness::scenario::{scenarios, CALIBRATION_WORLDS};
use homerun::harness::table1::{load_model, run_table1, write_table1};
use homerun::harness::{HarnessError, Result};
use homerun::planner::Blocking;
use homerun::worldmodel::{
    load_checkpoint, save_checkpoint, train_split, write_training_log, CheckpointMeta, ModelConfig, TrainConfig, WorldModel,
};
use rand::SeedableRng;

/// Data files resolve against this directory when given as relative paths.
const DATA_ROOT_VAR: &str = "HOMERUN_DATA";

#[derive(Parser)]
#[command(name = "homerun", version, about = "Active-inference agent that imagines shortcuts home")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record action/observation episodes in random worlds.
    Collect {
        #[arg(long, default_value_t = 12000)]
        steps: usize,
        #[arg(long, default_value_t = 39)]
        worlds: usize,
        #[arg(long, default_value = "scripted-forage")]
        policy: CollectPolicy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "dataset.hrds")]
        out: PathBuf,
    },
    /// Fit the world model to a dataset.
    Train {
        #[arg(long, default_value = "dataset.hrds")]
        dataset: PathBuf,
        #[arg(long, default_value = "tiny")]
        preset: String,
        /// Pixel noise scale of the likelihood; the preset's when omitted.
        #[arg(long)]
        obs_sigma: Option<f64>,
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "model.hrck")]
        out: PathBuf,
    },
    /// Fit blocking and shortcut thresholds on held-out worlds and store
    /// them in the checkpoint.
    Calibrate {
        #[arg(long, default_value = "models/tiny.hrck")]
        checkpoint: PathBuf,
        /// Forage steps per calibration world.
        #[arg(long, default_value_t = 400)]
        steps: usize,
        #[arg(long, default_value_t = 30)]
        pairs: usize,
        #[arg(long, default_value_t = 5)]
        d: usize,
        #[arg(long, value_enum, default_value_t = BlockingArg::Latent)]
        blocking: BlockingArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Forage through a world while building the experience map.
    Explore {
        #[arg(long, default_value_t = 1)]
        world_seed: u64,
        #[arg(long, default_value_t = 2)]
        rooms: usize,
        #[arg(long, default_value_t = 6)]
        room_size: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value = "map.json")]
        out: PathBuf,
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Run one home-run episode of one agent.
    Homerun {
        #[arg(long, default_value_t = 5)]
        d: usize,
        /// Index among the scenarios at distance `d`.
        #[arg(long, default_value_t = 0)]
        scenario: usize,
        #[arg(long)]
        closed: bool,
        #[arg(long, value_enum, default_value_t = AgentArg::Ours)]
        agent: AgentArg,
        /// Per-step JSON-lines log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Run every agent on every scenario and write the results table.
    Table1 {
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Write EFE fields and imagined rollouts for the door-ahead scenario.
    Figures {
        #[arg(long, default_value = "runs/figures")]
        out: PathBuf,
        #[command(flatten)]
        exp: ExpArgs,
    },
}

#[derive(Args)]
struct ExpArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set efe.samples=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ExpArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(self.config.as_deref(), &self.set)?;
        cfg.checkpoint = data_path(&cfg.checkpoint);
        cfg.out_dir = data_path(&cfg.out_dir);
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BlockingArg {
    Decoded,
    Latent,
}

#[derive(Clone, Copy, ValueEnum)]
enum AgentArg {
    Greedy,
    Traceback,
    Ours,
}

fn data_path(p: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_VAR) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Collect { steps, worlds, policy, seed, out } => {
            let ds = collect(steps, worlds, policy, seed)?;
            let out = data_path(&out);
            ds.save(&out)?;
            log::info!("wrote {} steps in {} episodes to {}", ds.total_steps(), ds.episodes.len(), out.display());
        }
        Command::Train { dataset, preset, obs_sigma, epochs, lr, batch, seed, out } => {
            let ds = Dataset::load(&data_path(&dataset))?;
            let mut cfg = ModelConfig::from_preset(&preset)?;
            if let Some(s) = obs_sigma {
                cfg.obs_sigma = s;
            }
            let train_cfg = TrainConfig { epochs, lr, batch_size: batch, seed, ..TrainConfig::default() };
            let mut model = WorldModel::new(cfg.clone(), seed)?;
            let out = data_path(&out);
            let log_path = out.with_extension("csv");
            let mut rows = Vec::new();
            let result = train_split(&mut model, &ds.episodes, &ds.meta.train, &ds.meta.validation, &train_cfg, |row, m| {
                rows.push(row.clone());
                write_training_log(&log_path, &rows)?;
                let meta = CheckpointMeta {
                    model: cfg.clone(),
                    epoch: row.epoch,
                    losses: rows.clone(),
                    train: Some(train_cfg.clone()),
                    calibration: None,
                };
                save_checkpoint(&out, m, &meta)
            });
            result?;
            log::info!("saved {}", out.display());
        }
        Command::Calibrate { checkpoint, steps, pairs, d, blocking, seed, exp } => {
            let cfg = exp.load()?;
            let path = data_path(&checkpoint);
            if !path.exists() {
                return Err(HarnessError::Config(format!("checkpoint {} not found", path.display())));
            }
            let (model, mut meta) = load_checkpoint(&path)?;
            let mut agent = cfg.agent(None);
            agent.planner.blocking = match blocking {
                BlockingArg::Decoded => Blocking::Decoded,
                BlockingArg::Latent => Blocking::Latent,
            };
            let plan = CalibrationPlan { worlds: CALIBRATION_WORLDS.to_vec(), steps, pairs, d, seed };
            let cal = calibrate(&model, &plan, &agent)?;
            println!("{}", serde_json::to_string_pretty(&cal)?);
            meta.calibration = Some(cal.to_json());
            save_checkpoint(&path, &model, &meta)?;
            log::info!("calibration stored in {}", path.display());
        }
        Command::Explore { world_seed, rooms, room_size, steps, out, exp } => {
            let cfg = exp.load()?;
            let (model, cal) = load_model(&cfg)?;
            let spec = homerun::gridworld::WorldSpec::sample(rooms, rooms, room_size, world_seed)?;
            let world = generate_world(&spec)?;
            let (x, y) = world.walkable_tiles()[0];
            let home = Pose::new(x, y, Heading::EAST);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
            let actions = forage(&world, home, steps, &mut rng);
            let (map, _) = explore_map(&world, &model, &Outbound { home, actions }, &cfg.agent(cal.as_ref()).clone());
            let out = data_path(&out);
            std::fs::write(&out, map.to_json())?;
            println!("{} view cells, {} nodes, {} links -> {}", map.cells.len(), map.nodes.len(), map.links.len(), out.display());
        }
        Command::Homerun { d, scenario, closed, agent, log, exp } => {
            let cfg = exp.load()?;
            let all = scenarios(&cfg.scenarios.worlds, &[d], scenario + 1, cfg.seed)?;
            let s = &all[scenario];
            let world = s.world(!closed)?;
            let agent_cfg;
            let ep = match agent {
                AgentArg::Greedy => run_greedy(&world, &s.outbound, cfg.agent.budget),
                AgentArg::Traceback => run_traceback(&world, &s.outbound, cfg.agent.budget),
                AgentArg::Ours => {
                    let (model, cal) = load_model(&cfg)?;
                    agent_cfg = cfg.agent(cal.as_ref());
                    run_ours(&world, &model, &s.outbound, Some(d), &agent_cfg).map_err(|e| HarnessError::Config(e.to_string()))?
                }
            };
            if let Some(path) = log {
                ep.write_jsonl(&data_path(&path))?;
            }
            let name = match agent {
                AgentArg::Greedy => AgentKind::Greedy,
                AgentArg::Traceback => AgentKind::TraceBack,
                AgentArg::Ours => AgentKind::Ours,
            }
            .name();
            println!("{} {} door {}: {} steps, {:?}", s.id, name, if closed { "closed" } else { "open" }, ep.step_count, ep.outcome);
            if let Some(dec) = &ep.decision {
                println!("G {:.3} threshold {:.3} shortcut {} dead end {}", dec.g, dec.threshold, dec.shortcut, dec.dead_end);
            }
            if ep.outcome == Outcome::BudgetExceeded {
                return Err(HarnessError::Budget(format!("{} steps", ep.step_count)));
            }
        }
        Command::Table1 { exp } => {
            let cfg = exp.load()?;
            let (model, cal) = load_model(&cfg)?;
            let t = run_table1(&cfg, &model, cal.as_ref())?;
            let manifest = write_table1(&cfg.out_dir, &t, &cfg, cal.as_ref())?;
            println!("{:>3} {:>10} {:>7} {:>8} {:>3}", "d", "agent", "door", "steps", "n");
            for r in &t.summary {
                println!("{:>3} {:>10} {:>7} {:>8.2} {:>3}", r.d, r.agent, r.door, r.mean_steps, r.n);
            }
            for s in &t.decisions {
                println!("d={} decision accuracy {:.2} shortcut rate {:.2} (n={})", s.d, s.accuracy, s.shortcut_rate, s.n);
            }
            log::info!("wrote {}", manifest.display());
        }
        Command::Figures { out, exp } => {
            let cfg = exp.load()?;
            let (model, cal) = load_model(&cfg)?;
            let out = data_path(&out);
            let figs = render_figures(&out, &cfg, &model, cal.as_ref())?;
            for p in &figs.panels {
                println!(
                    "door {}: argmin {:?}, goal {:?}, best plan G {:.3}",
                    if p.open { "open" } else { "closed" },
                    p.field.argmin(),
                    figs.goal_cell,
                    p.evaluation.best().efe
                );
            }
            log::info!("figures in {}", out.display());
        }
    }
    Ok(())
}


fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
