use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Command, EgoState, Point, LANE_WIDTH};

pub const VIEW_COUNT: usize = 2;

/// Ego-frame probe x coordinates per view; every view uses the same four
/// lateral offsets.
const PROBE_X: [[f64; 4]; VIEW_COUNT] = [[4.0, 12.0, 20.0, 28.0], [-20.0, -8.0, 40.0, 56.0]];
const PROBE_Y: [f64; 4] = [-5.25, -1.75, 1.75, 5.25];
const PROBES_PER_VIEW: usize = 16;
/// Three channels per probe plus three ego scalars.
const SENSOR_DIM: usize = 3 * PROBES_PER_VIEW + 3;
const VELOCITY_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObserverConfig {
    pub feature_dim: usize,
    /// Gaussian probe width in meters.
    pub probe_sigma: f64,
    pub projection_seed: u64,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            probe_sigma: 4.0,
            projection_seed: 0x5eed_0b5e,
        }
    }
}

/// Fixed, non-learned feature map from privileged scene state to `V`
/// feature vectors: `tanh(P_v · s_v + b_v[command])`.
#[derive(Clone, Debug)]
pub struct Observer {
    config: ObserverConfig,
    projections: Vec<Vec<f64>>,
    biases: Vec<[Vec<f64>; 3]>,
}

/// Obstacle snapshot as seen by the observer.
#[derive(Clone, Copy, Debug)]
pub struct ObstacleView {
    pub position: Point,
    pub velocity: Point,
}

impl Observer {
    pub fn new(config: ObserverConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.projection_seed);
        let weight = Normal::new(0.0, 1.0 / (SENSOR_DIM as f64).sqrt()).expect("valid std");
        let bias = Normal::new(0.0, 0.5).expect("valid std");
        let d = config.feature_dim;
        let projections = (0..VIEW_COUNT)
            .map(|_| (0..d * SENSOR_DIM).map(|_| weight.sample(&mut rng)).collect())
            .collect();
        let biases = (0..VIEW_COUNT)
            .map(|_| {
                let mut one = || (0..d).map(|_| bias.sample(&mut rng)).collect::<Vec<_>>();
                [one(), one(), one()]
            })
            .collect();
        Self {
            config,
            projections,
            biases,
        }
    }

    pub fn config(&self) -> &ObserverConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// `tanh(b_v[command])`: the features of an empty scene with a stationary,
    /// lane-centred, forward-facing ego.
    pub fn bias_embedding(&self, command: Command) -> Vec<Vec<f64>> {
        self.biases
            .iter()
            .map(|b| b[command.index()].iter().map(|v| v.tanh()).collect())
            .collect()
    }

    fn sensors(&self, view: usize, ego: &EgoState, obstacles: &[ObstacleView]) -> Vec<f64> {
        let (s, c) = ego.heading.sin_cos();
        let ego_v = [ego.speed * c, ego.speed * s];
        let inv = 1.0 / (2.0 * self.config.probe_sigma.powi(2));
        let local: Vec<(Point, Point)> = obstacles
            .iter()
            .map(|o| {
                let (dx, dy) = (o.position[0] - ego.x, o.position[1] - ego.y);
                let (vx, vy) = (o.velocity[0] - ego_v[0], o.velocity[1] - ego_v[1]);
                (
                    [c * dx + s * dy, -s * dx + c * dy],
                    [c * vx + s * vy, -s * vx + c * vy],
                )
            })
            .collect();

        let mut out = Vec::with_capacity(SENSOR_DIM);
        for &px in &PROBE_X[view] {
            for &py in &PROBE_Y {
                let (mut occ, mut rvx, mut rvy) = (0.0, 0.0, 0.0);
                for (p, v) in &local {
                    let d2 = (p[0] - px).powi(2) + (p[1] - py).powi(2);
                    let w = (-d2 * inv).exp();
                    occ += w;
                    rvx += w * v[0] * VELOCITY_SCALE;
                    rvy += w * v[1] * VELOCITY_SCALE;
                }
                out.extend([occ, rvx, rvy]);
            }
        }
        out.push(ego.speed * VELOCITY_SCALE);
        out.push(ego.y / LANE_WIDTH);
        out.push(ego.heading);
        out
    }

    /// Features for one scene state.
    pub fn features(
        &self,
        ego: &EgoState,
        obstacles: &[ObstacleView],
        command: Command,
    ) -> Vec<Vec<f64>> {
        let d = self.config.feature_dim;
        (0..VIEW_COUNT)
            .map(|view| {
                let s = self.sensors(view, ego, obstacles);
                let p = &self.projections[view];
                let b = &self.biases[view][command.index()];
                (0..d)
                    .map(|i| {
                        let row = &p[i * SENSOR_DIM..(i + 1) * SENSOR_DIM];
                        let pre: f64 = row.iter().zip(&s).map(|(w, x)| w * x).sum();
                        (pre + b[i]).tanh()
                    })
                    .collect()
            })
            .collect()
    }

    /// Upper bound on `‖Δfeatures‖₂ / ε` when one obstacle is translated by `ε`
    /// while its relative speed stays below `max_rel_speed`.
    ///
    /// Each probe channel is `w·(1, rv)` with `w` a Gaussian of the probe
    /// distance, whose gradient norm never exceeds `1/(σ√e)`; `tanh` is
    /// 1-Lipschitz, so the bound is `max_v ‖P_v‖₂ · √(views·probes·(1 + 2·rv²)) / (σ√e)`.
    pub fn lipschitz_bound(&self, max_rel_speed: f64) -> f64 {
        let rv = max_rel_speed * VELOCITY_SCALE;
        let per_probe = (1.0 + 2.0 * rv * rv).sqrt();
        let sensor = per_probe * (PROBES_PER_VIEW as f64).sqrt()
            / (self.config.probe_sigma * std::f64::consts::E.sqrt());
        let spectral = self
            .projections
            .iter()
            .map(|p| spectral_norm(p, self.config.feature_dim, SENSOR_DIM))
            .fold(0.0, f64::max);
        spectral * sensor * (VIEW_COUNT as f64).sqrt()
    }
}

/// Largest singular value of a row-major `[rows × cols]` matrix (power iteration
/// on `AᵀA`, padded by 1% for iteration slack).
fn spectral_norm(a: &[f64], rows: usize, cols: usize) -> f64 {
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    let mut sigma = 0.0;
    for _ in 0..200 {
        let av: Vec<f64> = (0..rows)
            .map(|i| a[i * cols..(i + 1) * cols].iter().zip(&v).map(|(x, y)| x * y).sum())
            .collect();
        let mut atav = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                atav[j] += a[i * cols + j] * av[i];
            }
        }
        let n = atav.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        sigma = n.sqrt();
        v = atav.into_iter().map(|x| x / n).collect();
    }
    sigma * 1.01
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ego(speed: f64) -> EgoState {
        EgoState {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
            speed,
        }
    }

    #[test]
    fn empty_stationary_scene_gives_bias_embedding() {
        let obs = Observer::new(ObserverConfig::default());
        for cmd in Command::ALL {
            assert_eq!(obs.features(&ego(0.0), &[], cmd), obs.bias_embedding(cmd));
        }
    }

    #[test]
    fn identical_states_give_identical_features() {
        let a = Observer::new(ObserverConfig::default());
        let b = Observer::new(ObserverConfig::default());
        let o = [ObstacleView {
            position: [12.0, 3.0],
            velocity: [4.0, 0.0],
        }];
        assert_eq!(
            a.features(&ego(7.0), &o, Command::Left),
            b.features(&ego(7.0), &o, Command::Left)
        );
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let a = [3.0, 0.0, 0.0, 0.0, -5.0, 0.0];
        let s = spectral_norm(&a, 2, 3);
        assert!((s / 1.01 - 5.0).abs() < 1e-6);
    }
}
