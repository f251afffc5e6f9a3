//! Path integration of the agent's pose belief.
//!
//! Positions are in tile units, headings in degrees counter-clockwise from +x,
//! always kept in [0, 360). In exact mode (the default) the belief tracks the
//! world pose exactly, provided the caller reports blocked forwards.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::gridworld::{Action, Heading, Pose};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseBelief {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    /// Spread of the activity packet, in tiles.
    pub spread: f64,
}

fn wrap_degrees(h: f64) -> f64 {
    let w = h.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Unit step along `heading`; exact for multiples of 90°.
fn unit(heading: f64) -> (f64, f64) {
    if heading % 90.0 == 0.0 {
        let (dx, dy) = Heading::from_degrees(heading).delta();
        (dx as f64, dy as f64)
    } else {
        let r = heading.to_radians();
        (r.cos(), r.sin())
    }
}

impl PoseBelief {
    pub fn at(pose: Pose) -> Self {
        PoseBelief { x: pose.x as f64, y: pose.y as f64, heading: pose.heading.degrees(), spread: 0.0 }
    }

    /// Exact integration of one action. `blocked` is the executed-outcome
    /// flag: a blocked forward leaves the position where it was.
    pub fn integrate(&self, action: Action, blocked: bool) -> Self {
        let mut next = *self;
        match action {
            Action::Forward if !blocked => {
                let (dx, dy) = unit(self.heading);
                next.x += dx;
                next.y += dy;
            }
            Action::Forward => {}
            Action::TurnLeft => next.heading = wrap_degrees(self.heading + 90.0),
            Action::TurnRight => next.heading = wrap_degrees(self.heading - 90.0),
        }
        next
    }

    /// Integrates a whole action sequence, every step executed.
    pub fn integrate_all(&self, actions: &[Action]) -> Self {
        actions.iter().fold(*self, |b, &a| b.integrate(a, false))
    }

    /// Recentres the belief on `anchor` with zero spread.
    pub fn reset_to(&self, anchor: Pose) -> Self {
        PoseBelief::at(anchor)
    }

    /// Nearest grid pose.
    pub fn nearest(&self) -> Pose {
        Pose::new(self.x.round() as i32, self.y.round() as i32, Heading::from_degrees(self.heading))
    }

    pub fn distance(&self, other: &PoseBelief) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Signed heading difference `self - other` in (-180, 180].
    pub fn heading_diff(&self, other: &PoseBelief) -> f64 {
        let d = wrap_degrees(self.heading - other.heading);
        if d > 180.0 {
            d - 360.0
        } else {
            d
        }
    }

    /// Pose of `self` in the egocentric frame of `origin`: (lateral to the
    /// right, ahead) in tiles.
    pub fn relative_to(&self, origin: &PoseBelief) -> (f64, f64) {
        let (fx, fy) = unit(origin.heading);
        let (dx, dy) = (self.x - origin.x, self.y - origin.y);
        // right of heading (fx, fy) is (fy, -fx)
        (dx * fy - dy * fx, dx * fx + dy * fy)
    }
}

/// KL divergence between two pose Gaussians with equal, fixed spreads:
/// `sigma_xy` tiles on each axis and `sigma_deg` on heading.
pub fn pose_kl(a: &PoseBelief, b: &PoseBelief, sigma_xy: f64, sigma_deg: f64) -> f64 {
    let dxy2 = (a.x - b.x).powi(2) + (a.y - b.y).powi(2);
    let dh = a.heading_diff(b);
    dxy2 / (2.0 * sigma_xy * sigma_xy) + dh * dh / (2.0 * sigma_deg * sigma_deg)
}

/// Path integrator with optional Gaussian drift.
#[derive(Clone, Debug)]
pub struct PathIntegrator {
    /// Positional noise per executed forward, in tiles.
    pub drift_sigma: f64,
    /// Spread added per step, in tiles.
    pub spread_growth: f64,
    rng: ChaCha8Rng,
}

impl PathIntegrator {
    pub fn exact() -> Self {
        Self::with_drift(0.0, 0.0, 0)
    }

    pub fn with_drift(drift_sigma: f64, spread_growth: f64, seed: u64) -> Self {
        PathIntegrator { drift_sigma, spread_growth, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn step(&mut self, belief: &PoseBelief, action: Action, blocked: bool) -> PoseBelief {
        let mut next = belief.integrate(action, blocked);
        if action == Action::Forward && !blocked && self.drift_sigma > 0.0 {
            next.x += self.drift_sigma * self.rng.sample::<f64, _>(StandardNormal);
            next.y += self.drift_sigma * self.rng.sample::<f64, _>(StandardNormal);
        }
        next.spread += self.spread_growth;
        next
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct TraceRow {
    step: usize,
    x: f64,
    y: f64,
    heading: f64,
}

/// Writes a pose trace as CSV with columns step, x, y, heading.
pub fn write_trace(path: &Path, trace: &[PoseBelief]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for (step, b) in trace.iter().enumerate() {
        w.serialize(TraceRow { step, x: b.x, y: b.y, heading: b.heading })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a trace written by [`write_trace`]; spreads come back as zero.
pub fn read_trace(path: &Path) -> Result<Vec<PoseBelief>, csv::Error> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<TraceRow>()
        .map(|row| row.map(|t| PoseBelief { x: t.x, y: t.y, heading: t.heading, spread: 0.0 }))
        .collect()
}
