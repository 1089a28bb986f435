//! Deterministic 2D driving simulator.
//!
//! The road is a straight three-lane carriageway along +x. Every episode is
//! a pure function of its seed and scenario: the expert drives a kinematic
//! bicycle with a pure-pursuit steering law and IDM longitudinal control,
//! obstacles follow constant-velocity or scripted braking/crossing motion,
//! and each tick carries `V` observation vectors produced by a fixed seeded
//! projection of the privileged scene state.

mod collision;
mod dataset;
mod observe;
mod scenario;

use serde::{Deserialize, Serialize};

pub use collision::{check_collision, discs_overlap, ego_to_world};
pub use dataset::{Dataset, Split};
pub use observe::{ObstacleView, Observer, ObserverConfig, VIEW_COUNT};
pub use scenario::{generate_episode, ScenarioConfig, ScenarioKind};

use crate::error::{Error, Result};

/// Planning horizon in ticks (3 s at 0.5 s spacing).
pub const HORIZON: usize = 6;
/// Simulator tick length in seconds.
pub const DT: f64 = 0.5;
/// Ego disc radius in meters.
pub const EGO_RADIUS: f64 = 1.0;
pub const LANE_WIDTH: f64 = 3.5;
pub const LANE_COUNT: usize = 3;

/// Half width of the drivable surface.
pub fn road_half_width() -> f64 {
    LANE_WIDTH * LANE_COUNT as f64 / 2.0
}

/// Lateral coordinate of lane `i` (0 = rightmost).
pub fn lane_center(i: usize) -> f64 {
    (i as f64 - (LANE_COUNT as f64 - 1.0) / 2.0) * LANE_WIDTH
}

pub type Point = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Left,
    Right,
    Straight,
}

impl Command {
    pub const ALL: [Command; 3] = [Command::Left, Command::Right, Command::Straight];

    pub fn index(self) -> usize {
        match self {
            Command::Left => 0,
            Command::Right => 1,
            Command::Straight => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Command::Left => "left",
            Command::Right => "right",
            Command::Straight => "straight",
        }
    }
}

impl std::str::FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Command::Left),
            "right" => Ok(Command::Right),
            "straight" => Ok(Command::Straight),
            other => Err(Error::UnknownCommand(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    /// Radians in (−π, π].
    pub heading: f64,
    /// m/s, never negative.
    pub speed: f64,
}

impl EgoState {
    pub fn position(&self) -> Point {
        [self.x, self.y]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObstacleKind {
    Vehicle,
    Pedestrian,
    Static,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub kind: ObstacleKind,
    pub radius: f64,
    /// World position per tick; same length as the episode.
    pub trajectory: Vec<Point>,
}

impl Obstacle {
    /// Finite-difference velocity at tick `t`.
    pub fn velocity(&self, t: usize) -> Point {
        let n = self.trajectory.len();
        if n < 2 {
            return [0.0, 0.0];
        }
        let (a, b) = if t + 1 < n { (t, t + 1) } else { (n - 2, n - 1) };
        let (p, q) = (self.trajectory[a], self.trajectory[b]);
        [(q[0] - p[0]) / DT, (q[1] - p[1]) / DT]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub seed: u64,
    pub scenario: String,
    pub ticks: usize,
    pub commands: Vec<Command>,
    pub ego: Vec<EgoState>,
    pub obstacles: Vec<Obstacle>,
    /// Next `HORIZON` expert waypoints in the ego frame of each tick.
    pub expert_trajectory: Vec<Vec<Point>>,
    /// `VIEW_COUNT` feature vectors per tick.
    pub observation_features: Vec<Vec<Vec<f64>>>,
}

impl Episode {
    /// Ticks `t` with a full horizon of future ticks inside the episode.
    pub fn plannable_ticks(&self) -> std::ops::RangeInclusive<usize> {
        0..=self.ticks.saturating_sub(HORIZON + 1)
    }

    pub fn observe(&self, t: usize) -> Result<&[Vec<f64>]> {
        self.observation_features
            .get(t)
            .map(Vec::as_slice)
            .ok_or(Error::Bounds {
                what: "observe tick",
                index: t,
                len: self.ticks,
            })
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn normalize_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = a % two_pi;
    if a <= -std::f64::consts::PI {
        a += two_pi;
    } else if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}
