//! Home-run scenarios: the agent ends `d` steps from home across a door.
//!
//! Home lies in one room and the end pose in the neighbouring room, on the
//! straight line through the shared door. The outbound walk avoids that door
//! and goes round through the other rooms, so the same walk is valid whether
//! the door is open or closed. The walk ends facing home, `d` tiles away,
//! so the direct route is `d` forward steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::Outbound;
use crate::gridworld::{generate_world, Action, GridError, Heading, Pose, World, WorldSpec};

/// One of the fixed evaluation layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldEntry {
    pub seed: u64,
    pub room_size: usize,
}

impl WorldEntry {
    pub fn spec(&self) -> Result<WorldSpec, GridError> {
        WorldSpec::sample(2, 2, self.room_size, self.seed)
    }
}

/// The four held-out 2x2 test worlds.
pub const TEST_WORLDS: [WorldEntry; 4] = [
    WorldEntry { seed: 0x7E57_0001, room_size: 6 },
    WorldEntry { seed: 0x7E57_0002, room_size: 7 },
    WorldEntry { seed: 0x7E57_0003, room_size: 6 },
    WorldEntry { seed: 0x7E57_0004, room_size: 7 },
];

/// Worlds used to calibrate the planner, distinct from training and test.
pub const CALIBRATION_WORLDS: [WorldEntry; 4] = [
    WorldEntry { seed: 0xCA1B_0001, room_size: 6 },
    WorldEntry { seed: 0xCA1B_0002, room_size: 7 },
    WorldEntry { seed: 0xCA1B_0003, room_size: 7 },
    WorldEntry { seed: 0xCA1B_0004, room_size: 6 },
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub d: usize,
    pub world: WorldEntry,
    /// Index of the door between the home room and the end room.
    pub door: usize,
    pub outbound: Outbound,
    pub end: Pose,
}

impl Scenario {
    /// The world with the shared door in the requested state and every
    /// other door open.
    pub fn world(&self, open: bool) -> Result<World, GridError> {
        let w = generate_world(&self.world.spec()?)?;
        Ok(w.with_door(self.door, open))
    }
}

/// Turns needed to face `to` from `from`.
fn turn_cost(from: Heading, to: Heading) -> usize {
    match (to.quarters() - from.quarters()).rem_euclid(4) {
        0 => 0,
        2 => 2,
        _ => 1,
    }
}

/// Draws one scenario at distance `d` in `entry`. Retries until a layout
/// fits; fails only when `d` cannot fit in the world at all.
pub fn sample_scenario(entry: WorldEntry, d: usize, rng: &mut impl Rng) -> Result<Option<Scenario>, GridError> {
    let spec = entry.spec()?;
    let world = generate_world(&spec)?;
    let p = spec.room_size as i32;
    for _ in 0..256 {
        let door = rng.gen_range(0..spec.doors.len());
        let dp = spec.doors[door];
        // doors on vertical walls join rooms left and right
        let horizontal = dp.x % p == 0;
        let m = d as i32;
        let a = rng.gen_range(1..m.max(2));
        let b = m - a;
        if a < 1 || b < 1 || a > p - 1 || b > p - 1 {
            continue;
        }
        // home on one side of the door, end on the other
        let flip = rng.gen_bool(0.5);
        let (axis, s) = if horizontal { ((1, 0), if flip { 1 } else { -1 }) } else { ((0, 1), if flip { 1 } else { -1 }) };
        let home_xy = (dp.x - s * axis.0 * a, dp.y - s * axis.1 * a);
        let end_xy = (dp.x + s * axis.0 * b, dp.y + s * axis.1 * b);
        // travel from end towards home
        let towards_home = Heading::from_delta(-s * axis.0, -s * axis.1).expect("unit axis");
        let home = Pose::new(home_xy.0, home_xy.1, towards_home);
        let end = Pose::new(end_xy.0, end_xy.1, towards_home);
        if !world.walkable(home.x, home.y) || !world.walkable(end.x, end.y) {
            continue;
        }
        let Some(actions) = world.shortest_actions(home, end, &[(dp.x, dp.y)]) else {
            continue;
        };
        return Ok(Some(Scenario {
            id: String::new(),
            d,
            world: entry,
            door,
            outbound: Outbound { home, actions },
            end,
        }));
    }
    Ok(None)
}

/// `pairs` scenarios per distance, cycling through `worlds`. Each scenario
/// is run with the door open and closed.
pub fn scenarios(worlds: &[WorldEntry], distances: &[usize], pairs: usize, seed: u64) -> Result<Vec<Scenario>, GridError> {
    let mut out = Vec::new();
    for &d in distances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (d as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut j = 0usize;
        let mut misses = 0usize;
        while out.iter().filter(|s: &&Scenario| s.d == d).count() < pairs {
            let entry = worlds[j % worlds.len()];
            j += 1;
            match sample_scenario(entry, d, &mut rng)? {
                Some(mut s) => {
                    s.id = format!("d{d}-{:02}", out.iter().filter(|s: &&Scenario| s.d == d).count());
                    out.push(s);
                }
                None => {
                    misses += 1;
                    if misses > 8 * worlds.len() {
                        return Err(GridError::InvalidSpec(format!("no scenario at distance {d} fits these worlds")));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Length of the direct route from the end pose: turns to face home plus
/// straight moves.
pub fn direct_cost(s: &Scenario) -> usize {
    let h = s.outbound.home;
    let e = s.end;
    let toward = Heading::from_delta((h.x - e.x).signum(), (h.y - e.y).signum()).expect("home is on a straight line");
    turn_cost(e.heading, toward) + ((h.x - e.x).abs() + (h.y - e.y).abs()) as usize
}

/// Replays the outbound walk and checks it ends at the scenario's end pose
/// without using the shared door.
pub fn check_outbound(s: &Scenario, world: &World) -> bool {
    let door = world.spec().doors[s.door];
    let mut p = s.outbound.home;
    for &a in &s.outbound.actions {
        let (next, blocked) = world.next_pose(p, a);
        if blocked || (a == Action::Forward && (next.x, next.y) == (door.x, door.y)) {
            return false;
        }
        p = next;
    }
    p == s.end
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenarios_have_the_requested_distance() {
        let all = scenarios(&TEST_WORLDS, &[5, 6, 7, 9], 12, 0).unwrap();
        assert_eq!(all.len(), 48);
        for s in &all {
            assert_eq!(direct_cost(s), s.d, "{}", s.id);
            for open in [true, false] {
                let w = s.world(open).unwrap();
                assert!(check_outbound(s, &w), "{}", s.id);
                assert_eq!(w.door_states()[s.door], open);
                assert_eq!(w.door_states().iter().filter(|o| !**o).count(), usize::from(!open));
            }
        }
    }

    #[test]
    fn scenarios_are_reproducible() {
        let a = scenarios(&TEST_WORLDS, &[5, 9], 5, 7).unwrap();
        let b = scenarios(&TEST_WORLDS, &[5, 9], 5, 7).unwrap();
        assert_eq!(a, b);
        let c = scenarios(&TEST_WORLDS, &[5, 9], 5, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn test_worlds_are_not_calibration_worlds() {
        for t in TEST_WORLDS {
            assert!(!CALIBRATION_WORLDS.contains(&t));
            for i in 0..39 {
                assert_ne!(t.seed, crate::harness::dataset::collection_world_seed(0, i));
            }
        }
    }

    #[test]
    fn a_far_distance_is_an_error() {
        assert!(scenarios(&TEST_WORLDS[..1], &[30], 1, 0).is_err());
    }

    #[test]
    fn baselines_finish_every_scenario() {
        use crate::agents::{run_greedy, run_traceback, Outcome};
        for s in scenarios(&TEST_WORLDS, &[5, 6, 7, 9], 15, 0).unwrap() {
            let open = s.world(true).unwrap();
            let closed = s.world(false).unwrap();
            let g = run_greedy(&open, &s.outbound, 200);
            assert_eq!((g.outcome, g.step_count), (Outcome::Reached, s.d), "{}", s.id);
            let g = run_greedy(&closed, &s.outbound, 200);
            assert_eq!(g.outcome, Outcome::Reached, "{}", s.id);
            assert!(g.step_count > s.d);
            for w in [&open, &closed] {
                let t = run_traceback(w, &s.outbound, 200);
                assert_eq!(t.outcome, Outcome::Reached, "{}", s.id);
            }
        }
    }
}
