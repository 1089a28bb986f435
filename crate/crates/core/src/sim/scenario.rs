use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::collision::discs_overlap;
use super::observe::{ObstacleView, Observer};
use super::{
    lane_center, normalize_angle, Command, EgoState, Episode, Obstacle, ObstacleKind, Point, DT,
    EGO_RADIUS, HORIZON, LANE_COUNT, LANE_WIDTH,
};
use crate::error::{Error, Result};

const WHEELBASE: f64 = 2.7;
const MAX_STEER: f64 = 0.5;
const MAX_ACCEL: f64 = 2.0;
const MAX_BRAKE: f64 = 8.0;
/// Clearance the expert must keep beyond disc contact.
const SAFETY_MARGIN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// No obstacles; the expert keeps its lane.
    Empty,
    /// Random traffic, parked cars, crossing pedestrians and lane changes.
    Mixed,
    /// A lead vehicle in the ego lane brakes to a stop.
    LeadBraking,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub kind: ScenarioKind,
    pub ticks: usize,
    pub obstacle_count: (usize, usize),
    pub ego_speed: (f64, f64),
    pub obstacle_speed: (f64, f64),
    pub pedestrian_prob: f64,
    pub lane_change_prob: f64,
    pub max_retries: usize,
}

impl ScenarioConfig {
    pub fn mixed() -> Self {
        Self {
            name: "mixed".into(),
            kind: ScenarioKind::Mixed,
            ticks: 14,
            obstacle_count: (1, 4),
            ego_speed: (4.0, 12.0),
            obstacle_speed: (2.0, 10.0),
            pedestrian_prob: 0.25,
            lane_change_prob: 0.5,
            max_retries: 64,
        }
    }

    pub fn empty() -> Self {
        Self {
            name: "empty".into(),
            kind: ScenarioKind::Empty,
            obstacle_count: (0, 0),
            lane_change_prob: 0.0,
            ..Self::mixed()
        }
    }

    pub fn lead_braking() -> Self {
        Self {
            name: "lead_braking".into(),
            kind: ScenarioKind::LeadBraking,
            obstacle_count: (1, 1),
            ego_speed: (8.0, 12.0),
            lane_change_prob: 0.0,
            ..Self::mixed()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "mixed" => Ok(Self::mixed()),
            "empty" => Ok(Self::empty()),
            "lead_braking" => Ok(Self::lead_braking()),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.ticks > HORIZON + 1
            && self.obstacle_count.0 <= self.obstacle_count.1
            && self.ego_speed.0 >= 0.0
            && self.ego_speed.0 <= self.ego_speed.1
            && self.obstacle_speed.0 <= self.obstacle_speed.1
            && (0.0..=1.0).contains(&self.pedestrian_prob)
            && (0.0..=1.0).contains(&self.lane_change_prob)
            && self.max_retries > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid scenario {self:?}")))
        }
    }
}

/// Scripted obstacle motion, evaluated per tick.
#[derive(Clone, Copy, Debug)]
enum Motion {
    Constant { start: Point, velocity: Point },
    /// Constant speed along +x, then constant deceleration to rest.
    Braking { start: Point, speed: f64, brake_tick: usize, decel: f64 },
    /// Waits at the curb, then crosses laterally.
    Crossing { start: Point, vy: f64, start_tick: usize },
}

impl Motion {
    fn position(&self, tick: usize) -> Point {
        let t = tick as f64 * DT;
        match *self {
            Motion::Constant { start, velocity } => {
                [start[0] + velocity[0] * t, start[1] + velocity[1] * t]
            }
            Motion::Braking {
                start,
                speed,
                brake_tick,
                decel,
            } => {
                let tb = brake_tick as f64 * DT;
                if t <= tb {
                    [start[0] + speed * t, start[1]]
                } else {
                    let tau = (t - tb).min(speed / decel);
                    [start[0] + speed * tb + speed * tau - 0.5 * decel * tau * tau, start[1]]
                }
            }
            Motion::Crossing { start, vy, start_tick } => {
                let moving = tick.saturating_sub(start_tick) as f64 * DT;
                [start[0], start[1] + vy * moving]
            }
        }
    }
}

struct Draft {
    kind: ObstacleKind,
    radius: f64,
    motion: Motion,
}

/// Generates one episode; deterministic in `(seed, scenario)`.
pub fn generate_episode(seed: u64, scenario: &ScenarioConfig, observer: &Observer) -> Result<Episode> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = scenario.ticks + HORIZON;
    for _ in 0..scenario.max_retries {
        let ego_speed = rng.random_range(scenario.ego_speed.0..=scenario.ego_speed.1);
        let drafts = draft_obstacles(scenario, ego_speed, &mut rng);
        let lane_change = (scenario.lane_change_prob > 0.0
            && rng.random_bool(scenario.lane_change_prob))
        .then(|| {
            let dir: i64 = if rng.random_bool(0.5) { 1 } else { -1 };
            let tick = rng.random_range(1..scenario.ticks / 2);
            (dir, tick)
        });
        let obstacle_paths: Vec<Vec<Point>> = drafts
            .iter()
            .map(|d| (0..total).map(|t| d.motion.position(t)).collect())
            .collect();
        let ego = roll_out_expert(ego_speed, lane_change, &drafts, &obstacle_paths, total);
        if !expert_is_clear(&ego, &drafts, &obstacle_paths) {
            continue;
        }
        return Ok(assemble(seed, scenario, ego, drafts, obstacle_paths, observer));
    }
    Err(Error::Generation {
        seed,
        reason: format!(
            "no collision-free expert rollout in {} attempts",
            scenario.max_retries
        ),
    })
}

fn draft_obstacles<R: Rng>(scenario: &ScenarioConfig, ego_speed: f64, rng: &mut R) -> Vec<Draft> {
    match scenario.kind {
        ScenarioKind::Empty => vec![],
        ScenarioKind::LeadBraking => vec![Draft {
            kind: ObstacleKind::Vehicle,
            radius: 1.0,
            motion: Motion::Braking {
                start: [rng.random_range(18.0..26.0), lane_center(1)],
                speed: ego_speed,
                brake_tick: rng.random_range(1..4),
                decel: rng.random_range(2.5..4.0),
            },
        }],
        ScenarioKind::Mixed => {
            let (lo, hi) = scenario.obstacle_count;
            let n = rng.random_range(lo..=hi);
            (0..n)
                .map(|_| {
                    let roll: f64 = rng.random();
                    if roll < scenario.pedestrian_prob {
                        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        Draft {
                            kind: ObstacleKind::Pedestrian,
                            radius: 0.5,
                            motion: Motion::Crossing {
                                start: [rng.random_range(25.0..80.0), side * 7.0],
                                vy: -side * rng.random_range(0.8..1.6),
                                start_tick: rng.random_range(0..scenario.ticks),
                            },
                        }
                    } else if roll < scenario.pedestrian_prob + 0.2 {
                        let lane = rng.random_range(0..LANE_COUNT);
                        Draft {
                            kind: ObstacleKind::Static,
                            radius: 1.0,
                            motion: Motion::Constant {
                                start: [rng.random_range(30.0..90.0), lane_center(lane)],
                                velocity: [0.0, 0.0],
                            },
                        }
                    } else if roll < scenario.pedestrian_prob + 0.35 {
                        Draft {
                            kind: ObstacleKind::Vehicle,
                            radius: 1.0,
                            motion: Motion::Braking {
                                start: [rng.random_range(15.0..35.0), lane_center(1)],
                                speed: rng.random_range(scenario.obstacle_speed.0..=scenario.obstacle_speed.1),
                                brake_tick: rng.random_range(0..scenario.ticks),
                                decel: rng.random_range(1.5..3.5),
                            },
                        }
                    } else {
                        let lane = rng.random_range(0..LANE_COUNT);
                        Draft {
                            kind: ObstacleKind::Vehicle,
                            radius: 1.0,
                            motion: Motion::Constant {
                                start: [rng.random_range(-25.0..70.0), lane_center(lane)],
                                velocity: [
                                    rng.random_range(scenario.obstacle_speed.0..=scenario.obstacle_speed.1),
                                    0.0,
                                ],
                            },
                        }
                    }
                })
                .collect()
        }
    }
}

/// IDM acceleration toward `v0` behind the closest in-path obstacle.
fn idm_accel(ego: &EgoState, v0: f64, lead: Option<(f64, f64)>) -> f64 {
    const S0: f64 = 3.0;
    const HEADWAY: f64 = 1.2;
    const COMFORT_BRAKE: f64 = 3.0;
    let free = 1.0 - (ego.speed / v0.max(0.1)).powi(4);
    let interaction = match lead {
        Some((gap, lead_speed)) => {
            let dv = ego.speed - lead_speed;
            let s_star = S0
                + ego.speed * HEADWAY
                + ego.speed * dv / (2.0 * (MAX_ACCEL * COMFORT_BRAKE).sqrt());
            (s_star.max(0.0) / gap.max(0.1)).powi(2)
        }
        None => 0.0,
    };
    (MAX_ACCEL * (free - interaction)).clamp(-MAX_BRAKE, MAX_ACCEL)
}

fn roll_out_expert(
    cruise: f64,
    lane_change: Option<(i64, usize)>,
    drafts: &[Draft],
    paths: &[Vec<Point>],
    total: usize,
) -> Vec<EgoState> {
    let mut state = EgoState {
        x: 0.0,
        y: lane_center(1),
        heading: 0.0,
        speed: cruise,
    };
    let mut states = vec![state];
    for t in 0..total - 1 {
        let lane = match lane_change {
            Some((dir, at)) if t >= at => (1 + dir) as usize,
            _ => 1,
        };
        let target_y = lane_center(lane);

        // closest obstacle ahead whose lateral position overlaps the ego corridor
        let lead = drafts
            .iter()
            .zip(paths)
            .filter_map(|(d, p)| {
                let (pos, next) = (p[t], p[t + 1]);
                let dx = pos[0] - state.x;
                let in_corridor = (pos[1] - state.y).abs() < LANE_WIDTH * 0.6
                    || (pos[1] - target_y).abs() < LANE_WIDTH * 0.6;
                (dx > 0.0 && in_corridor).then(|| {
                    let gap = dx - d.radius - EGO_RADIUS;
                    (gap, (next[0] - pos[0]) / DT)
                })
            })
            .min_by(|a, b| a.0.total_cmp(&b.0));
        let accel = idm_accel(&state, cruise, lead);

        let lookahead = (state.speed * 1.5).max(6.0);
        let alpha = normalize_angle((target_y - state.y).atan2(lookahead) - state.heading);
        let steer = (2.0 * WHEELBASE * alpha.sin() / lookahead)
            .atan()
            .clamp(-MAX_STEER, MAX_STEER);

        let speed = (state.speed + accel * DT).max(0.0);
        let heading = normalize_angle(state.heading + speed / WHEELBASE * steer.tan() * DT);
        let (s, c) = heading.sin_cos();
        state = EgoState {
            x: state.x + speed * DT * c,
            y: state.y + speed * DT * s,
            heading,
            speed,
        };
        states.push(state);
    }
    states
}

fn expert_is_clear(ego: &[EgoState], drafts: &[Draft], paths: &[Vec<Point>]) -> bool {
    ego.iter().enumerate().all(|(t, e)| {
        drafts.iter().zip(paths).all(|(d, p)| {
            !discs_overlap(e.position(), EGO_RADIUS + SAFETY_MARGIN, p[t], d.radius)
        })
    })
}

fn to_ego_frame(pose: &EgoState, p: Point) -> Point {
    let (s, c) = pose.heading.sin_cos();
    let (dx, dy) = (p[0] - pose.x, p[1] - pose.y);
    [c * dx + s * dy, -s * dx + c * dy]
}

fn assemble(
    seed: u64,
    scenario: &ScenarioConfig,
    ego_full: Vec<EgoState>,
    drafts: Vec<Draft>,
    paths: Vec<Vec<Point>>,
    observer: &Observer,
) -> Episode {
    let ticks = scenario.ticks;
    let expert_trajectory: Vec<Vec<Point>> = (0..ticks)
        .map(|t| {
            (1..=HORIZON)
                .map(|j| to_ego_frame(&ego_full[t], ego_full[t + j].position()))
                .collect()
        })
        .collect();
    let commands: Vec<Command> = expert_trajectory
        .iter()
        .map(|wps| {
            let lateral = wps[HORIZON - 1][1];
            if lateral > 1.0 {
                Command::Left
            } else if lateral < -1.0 {
                Command::Right
            } else {
                Command::Straight
            }
        })
        .collect();
    let obstacles: Vec<Obstacle> = drafts
        .iter()
        .zip(paths)
        .map(|(d, p)| Obstacle {
            kind: d.kind,
            radius: d.radius,
            trajectory: p[..ticks].to_vec(),
        })
        .collect();
    let ego: Vec<EgoState> = ego_full[..ticks].to_vec();
    let observation_features = (0..ticks)
        .map(|t| observe_tick(observer, &ego[t], &obstacles, t, commands[t]))
        .collect();
    Episode {
        id: format!("{}-{seed}", scenario.name),
        seed,
        scenario: scenario.name.clone(),
        ticks,
        commands,
        ego,
        obstacles,
        expert_trajectory,
        observation_features,
    }
}

pub(super) fn observe_tick(
    observer: &Observer,
    ego: &EgoState,
    obstacles: &[Obstacle],
    t: usize,
    command: Command,
) -> Vec<Vec<f64>> {
    let views: Vec<ObstacleView> = obstacles
        .iter()
        .map(|o| ObstacleView {
            position: o.trajectory[t],
            velocity: o.velocity(t),
        })
        .collect();
    observer.features(ego, &views, command)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{check_collision, ObserverConfig};

    fn observer() -> Observer {
        Observer::new(ObserverConfig::default())
    }

    #[test]
    fn empty_scenario_keeps_lane_without_collisions() {
        let ep = generate_episode(3, &ScenarioConfig::empty(), &observer()).unwrap();
        assert!(ep.obstacles.is_empty());
        assert!(ep.commands.iter().all(|&c| c == Command::Straight));
        for t in ep.plannable_ticks() {
            assert!(check_collision(&ep.expert_trajectory[t], &ep, t).unwrap().is_none());
            for w in &ep.expert_trajectory[t] {
                assert!(w[1].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_episode(11, &ScenarioConfig::mixed(), &observer()).unwrap();
        let b = generate_episode(11, &ScenarioConfig::mixed(), &observer()).unwrap();
        assert_eq!(a.to_json_line().unwrap(), b.to_json_line().unwrap());
    }

    #[test]
    fn lead_braking_slows_the_expert() {
        for seed in 0..10 {
            let ep = generate_episode(seed, &ScenarioConfig::lead_braking(), &observer()).unwrap();
            let first = ep.ego[0].speed;
            let last = ep.ego[ep.ticks - 1].speed;
            assert!(last < first, "seed {seed}: {first} -> {last}");
        }
    }

    #[test]
    fn per_tick_displacement_matches_speed() {
        for seed in 0..20 {
            let ep = generate_episode(seed, &ScenarioConfig::mixed(), &observer()).unwrap();
            for w in ep.ego.windows(2) {
                let d = ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt();
                assert!((d - w[1].speed * DT).abs() <= 1e-9);
                assert!(w[1].speed >= 0.0);
                assert!(w[1].heading > -std::f64::consts::PI && w[1].heading <= std::f64::consts::PI);
            }
        }
    }

    #[test]
    fn observation_features_are_stored_per_tick() {
        let obs = observer();
        let ep = generate_episode(5, &ScenarioConfig::mixed(), &obs).unwrap();
        assert_eq!(ep.observation_features.len(), ep.ticks);
        let again = observe_tick(&obs, &ep.ego[4], &ep.obstacles, 4, ep.commands[4]);
        assert_eq!(ep.observe(4).unwrap(), again.as_slice());
        assert!(ep.observe(ep.ticks).is_err());
    }

    #[test]
    fn impossible_scenario_reports_seed() {
        let mut cfg = ScenarioConfig::mixed();
        cfg.ego_speed = (30.0, 30.0);
        cfg.obstacle_speed = (0.0, 0.0);
        cfg.obstacle_count = (4, 4);
        cfg.pedestrian_prob = 0.0;
        cfg.lane_change_prob = 0.0;
        cfg.max_retries = 1;
        // stopping distance at 30 m/s exceeds the nearest stopped car's range
        let err = (0..50)
            .map(|s| generate_episode(s, &cfg, &observer()))
            .find_map(|r| r.err());
        assert!(matches!(err, Some(Error::Generation { .. })), "{err:?}");

        let mut bad = ScenarioConfig::mixed();
        bad.ticks = 3;
        assert!(matches!(
            generate_episode(0, &bad, &observer()),
            Err(Error::Config(_))
        ));
    }
}
