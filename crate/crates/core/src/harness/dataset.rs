//! Recorded action/observation episodes and the scripted forager that makes them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::gridworld::{
    generate_world, Action, Heading, Pose, World, WorldSpec, MAX_ROOMS, MAX_ROOM_SIZE, MIN_ROOMS, MIN_ROOM_SIZE,
    OBS_LEN,
};
use crate::worldmodel::{split_episodes, Recording};

const MAGIC: &[u8; 4] = b"HRDS";
const VERSION: u32 = 1;
const NO_ACTION: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollectPolicy {
    Random,
    ScriptedForage,
}

impl std::str::FromStr for CollectPolicy {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(CollectPolicy::Random),
            "scripted-forage" | "forage" => Ok(CollectPolicy::ScriptedForage),
            other => Err(HarnessError::Config(format!("unknown collection policy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub spec: WorldSpec,
    pub start: Pose,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub policy: CollectPolicy,
    pub seed: u64,
    pub n_steps: usize,
    pub n_worlds: usize,
    pub episodes: Vec<EpisodeMeta>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub episodes: Vec<Recording>,
}

impl Dataset {
    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(Recording::len).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            let json = serde_json::to_vec(&self.meta)?;
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            for ep in &self.episodes {
                let codes: Vec<u8> = ep.actions.iter().map(|a| a.map_or(NO_ACTION, |a| a.index() as u8)).collect();
                w.write_all(&codes)?;
                w.write_all(&ep.rgb)?;
            }
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(HarnessError::Format("not a dataset file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(HarnessError::Format(format!("unsupported dataset version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let meta: DatasetMeta = serde_json::from_slice(&json)?;
        let mut episodes = Vec::with_capacity(meta.episodes.len());
        for em in &meta.episodes {
            let mut codes = vec![0u8; em.len];
            r.read_exact(&mut codes)?;
            let actions = codes
                .iter()
                .map(|&c| match c {
                    NO_ACTION => Ok(None),
                    c => Action::from_index(c as usize)
                        .map(Some)
                        .ok_or_else(|| HarnessError::Format(format!("bad action code {c}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let mut rgb = vec![0u8; em.len * OBS_LEN];
            r.read_exact(&mut rgb)?;
            episodes.push(Recording { actions, rgb });
        }
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(HarnessError::Format("trailing bytes after last episode".into()));
        }
        Ok(Dataset { meta, episodes })
    }
}

/// Seed of the i-th collection world; kept away from the test-world seeds.
pub fn collection_world_seed(seed: u64, i: usize) -> u64 {
    0x00C0_11EC_7000_0000 ^ (seed << 16) ^ i as u64
}

/// Records `n_steps` frames spread over `n_worlds` random worlds.
pub fn collect(n_steps: usize, n_worlds: usize, policy: CollectPolicy, seed: u64) -> Result<Dataset> {
    if n_worlds == 0 && n_steps > 0 {
        return Err(HarnessError::Config("cannot record steps in zero worlds".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut metas = Vec::new();
    let mut episodes = Vec::new();
    for i in 0..n_worlds {
        let len = n_steps / n_worlds + usize::from(i < n_steps % n_worlds);
        if len == 0 {
            continue;
        }
        let rooms = rng.gen_range(MIN_ROOMS..=MAX_ROOMS);
        let size = rng.gen_range(MIN_ROOM_SIZE..=MAX_ROOM_SIZE);
        let spec = WorldSpec::sample(rooms, rooms, size, collection_world_seed(seed, i))?;
        let world = generate_world(&spec)?;
        let tiles = world.walkable_tiles();
        let &(x, y) = tiles.choose(&mut rng).expect("worlds have floor");
        let start = Pose::new(x, y, Heading::from_quarters(rng.gen_range(0..4)));
        let actions = match policy {
            CollectPolicy::Random => (1..len).map(|_| *Action::ALL.choose(&mut rng).expect("three actions")).collect(),
            CollectPolicy::ScriptedForage => forage(&world, start, len.saturating_sub(1), &mut rng),
        };
        episodes.push(record(&world, start, &actions));
        metas.push(EpisodeMeta { spec, start, len });
    }
    let (train, validation) = split_episodes(episodes.len(), 2.0 / 3.0, seed);
    let meta = DatasetMeta { policy, seed, n_steps, n_worlds, episodes: metas, train, validation };
    Ok(Dataset { meta, episodes })
}

/// Replays `actions` from `start`, recording every frame.
pub fn record(world: &World, start: Pose, actions: &[Action]) -> Recording {
    let mut rgb = Vec::with_capacity((actions.len() + 1) * OBS_LEN);
    rgb.extend(world.render_view(&start).to_rgb_bytes());
    let mut pose = start;
    for &a in actions {
        let tr = world.step(pose, a);
        pose = tr.pose;
        rgb.extend(tr.observation.to_rgb_bytes());
    }
    let mut recorded = vec![None];
    recorded.extend(actions.iter().map(|&a| Some(a)));
    Recording { actions: recorded, rgb }
}

/// Coverage-biased wandering: walks to random targets (doors preferred, so
/// rooms get crossed), bumps into walls now and then and spins in place.
pub fn forage<R: Rng>(world: &World, start: Pose, n: usize, rng: &mut R) -> Vec<Action> {
    let tiles = world.walkable_tiles();
    let doors: Vec<(i32, i32)> = world
        .spec()
        .doors
        .iter()
        .zip(world.door_states())
        .filter(|(_, open)| **open)
        .map(|(d, _)| (d.x, d.y))
        .collect();
    let mut out = Vec::with_capacity(n);
    let mut pose = start;
    let push = |a: Action, pose: &mut Pose, out: &mut Vec<Action>| {
        if out.len() < n {
            out.push(a);
            *pose = world.next_pose(*pose, a).0;
        }
    };
    while out.len() < n {
        let mode: f64 = rng.gen();
        if mode < 0.55 {
            let (tx, ty) = if !doors.is_empty() && rng.gen_bool(0.5) {
                *doors.choose(rng).expect("non-empty")
            } else {
                *tiles.choose(rng).expect("non-empty")
            };
            let goal = Pose::new(tx, ty, Heading::from_quarters(rng.gen_range(0..4)));
            let Some(path) = world.shortest_actions(pose, goal, &[]) else { continue };
            for a in path {
                if out.len() >= n {
                    break;
                }
                // occasional glance sideways
                if rng.gen_bool(0.05) {
                    let t = if rng.gen_bool(0.5) { Action::TurnLeft } else { Action::TurnRight };
                    push(t, &mut pose, &mut out);
                    push(t.inverse(), &mut pose, &mut out);
                }
                push(a, &mut pose, &mut out);
            }
        } else if mode < 0.85 {
            // march until something is in the way, then keep pushing
            let mut extra = rng.gen_range(1..=3);
            while out.len() < n {
                let blocked = world.next_pose(pose, Action::Forward).1;
                push(Action::Forward, &mut pose, &mut out);
                if blocked {
                    extra -= 1;
                    if extra == 0 {
                        break;
                    }
                }
            }
        } else {
            let t = if rng.gen_bool(0.5) { Action::TurnLeft } else { Action::TurnRight };
            for _ in 0..rng.gen_range(1..=4) {
                push(t, &mut pose, &mut out);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::OBS_SIDE;

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.hrds");
        let ds = collect(0, 39, CollectPolicy::ScriptedForage, 1).unwrap();
        assert_eq!(ds.total_steps(), 0);
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
    }

    #[test]
    fn collection_sizes_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("small.hrds");
        let ds = collect(100, 7, CollectPolicy::ScriptedForage, 3).unwrap();
        assert_eq!(ds.total_steps(), 100);
        assert_eq!(ds.episodes.len(), 7);
        for ep in &ds.episodes {
            assert_eq!(ep.rgb.len(), ep.len() * OBS_LEN);
            assert_eq!(ep.frame(0).shape(), [3, OBS_SIDE, OBS_SIDE]);
            assert_eq!(ep.actions[0], None);
            assert!(ep.actions[1..].iter().all(Option::is_some));
        }
        let mut all: Vec<usize> = ds.meta.train.iter().chain(&ds.meta.validation).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
    }

    #[test]
    fn recordings_replay_in_their_worlds() {
        let ds = collect(60, 2, CollectPolicy::Random, 9).unwrap();
        for (ep, m) in ds.episodes.iter().zip(&ds.meta.episodes) {
            let world = generate_world(&m.spec).unwrap();
            let mut pose = m.start;
            for i in 1..ep.len() {
                pose = world.step(pose, ep.actions[i].unwrap()).pose;
                assert_eq!(ep.frame(i), world.render_view(&pose));
            }
        }
    }

    #[test]
    fn forage_bumps_and_crosses_rooms() {
        let spec = WorldSpec::sample(2, 2, 5, 4).unwrap();
        let world = generate_world(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let start = Pose::new(1, 1, Heading::EAST);
        let actions = forage(&world, start, 400, &mut rng);
        assert_eq!(actions.len(), 400);
        let (mut pose, mut bumps) = (start, 0);
        let mut rooms = std::collections::HashSet::new();
        for a in actions {
            let (next, blocked) = world.next_pose(pose, a);
            bumps += usize::from(blocked);
            pose = next;
            rooms.extend(spec.room_at(pose.x, pose.y));
        }
        assert!(bumps >= 5, "{bumps} bumps");
        assert!(rooms.len() >= 3, "visited {} rooms", rooms.len());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.hrds");
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(Dataset::load(&path), Err(HarnessError::Format(_))));
    }
}
