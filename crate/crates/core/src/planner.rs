//! Multi-mode trajectory planner: scene-query encoding, per-command
//! trajectory queries refined against anchors, and a per-mode score head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{AttentionBlock, Linear, Mlp};
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::sim::{Command, Point, DT, HORIZON, VIEW_COUNT};

/// Meters per unit of trajectory-head output.
const RESIDUAL_SCALE: f64 = 4.0;
const ANCHOR_SPEED: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub n_modes: usize,
    pub n_commands: usize,
    pub d_model: usize,
    pub n_scene_queries: usize,
    pub depth: usize,
    /// Largest allowed speed implied by consecutive waypoints, m/s.
    pub v_max: f64,
    pub obs_dim: usize,
    pub n_views: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            n_modes: 6,
            n_commands: 3,
            d_model: 32,
            n_scene_queries: 4,
            depth: 1,
            v_max: 20.0,
            obs_dim: 32,
            n_views: VIEW_COUNT,
        }
    }
}

/// One candidate trajectory and its score logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMode {
    pub waypoints: Vec<Point>,
    pub score_logit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    pub modes: Vec<TrajectoryMode>,
    pub command: Command,
    pub anchors: Vec<Vec<Point>>,
}

impl TrajectorySet {
    pub fn logits(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.score_logit).collect()
    }
}

/// Index of the highest logit; ties resolve to the lowest index.
pub fn argmax_index(logits: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in logits.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// The inference output: the mode with the highest score logit.
pub fn select_output(set: &TrajectorySet) -> Result<(usize, &TrajectoryMode)> {
    let idx = argmax_index(&set.logits())
        .ok_or_else(|| Error::contract("cannot select from an empty trajectory set"))?;
    Ok((idx, &set.modes[idx]))
}

/// Smooth lateral profile `Δy · smoothstep(t / t_complete)` at constant speed.
fn lateral_template(speed: f64, lateral: f64, t_complete: f64) -> Vec<Point> {
    (1..=HORIZON)
        .map(|i| {
            let t = i as f64 * DT;
            let u = (t / t_complete).min(1.0);
            [speed * t, lateral * u * u * (3.0 - 2.0 * u)]
        })
        .collect()
}

fn stop_template(speed: f64, decel: f64) -> Vec<Point> {
    let t_stop = speed / decel;
    (1..=HORIZON)
        .map(|i| {
            let t = (i as f64 * DT).min(t_stop);
            [speed * t - 0.5 * decel * t * t, 0.0]
        })
        .collect()
}

/// Analytic anchor trajectories for `command`; always `n_modes` long.
///
/// The first six are straight, gentle/hard left, gentle/hard right and stop
/// (reordered per command so the command-consistent maneuvers come first);
/// extra modes cycle through speed-scaled copies.
pub fn anchor_templates(command: Command, n_modes: usize) -> Vec<Vec<Point>> {
    let v = ANCHOR_SPEED;
    let base = match command {
        Command::Straight => vec![
            lateral_template(v, 0.0, 3.0),
            lateral_template(v, 1.5, 3.0),
            lateral_template(v, 3.5, 3.0),
            lateral_template(v, -1.5, 3.0),
            lateral_template(v, -3.5, 3.0),
            stop_template(v, 3.0),
        ],
        Command::Left => vec![
            lateral_template(v, 3.5, 3.0),
            lateral_template(v, 3.5, 2.0),
            lateral_template(v, 1.75, 3.0),
            lateral_template(v, 0.0, 3.0),
            lateral_template(v, -1.75, 3.0),
            stop_template(v, 3.0),
        ],
        Command::Right => vec![
            lateral_template(v, -3.5, 3.0),
            lateral_template(v, -3.5, 2.0),
            lateral_template(v, -1.75, 3.0),
            lateral_template(v, 0.0, 3.0),
            lateral_template(v, 1.75, 3.0),
            stop_template(v, 3.0),
        ],
    };
    (0..n_modes)
        .map(|i| {
            let round = i / base.len();
            let factor = 1.0 + 0.25 * round as f64 * if round % 2 == 1 { 1.0 } else { -1.0 };
            base[i % base.len()]
                .iter()
                .map(|p| [p[0] * factor, p[1]])
                .collect()
        })
        .collect()
}

/// Rescales any step longer than `max_step` to that length, walking from
/// the ego origin so later waypoints follow their clamped predecessors.
pub fn clamp_steps(waypoints: &[Point], max_step: f64) -> Vec<Point> {
    let mut prev_raw = [0.0, 0.0];
    let mut prev_out = [0.0, 0.0];
    waypoints
        .iter()
        .map(|&p| {
            let (dx, dy) = (p[0] - prev_raw[0], p[1] - prev_raw[1]);
            let len = (dx * dx + dy * dy).sqrt();
            let k = if len > max_step { max_step / len } else { 1.0 };
            let out = [prev_out[0] + dx * k, prev_out[1] + dy * k];
            prev_raw = p;
            prev_out = out;
            out
        })
        .collect()
}

pub fn flatten_points(points: &[Point]) -> Vec<f64> {
    points.iter().flat_map(|p| [p[0], p[1]]).collect()
}

pub fn unflatten_points(flat: &[f64]) -> Vec<Point> {
    flat.chunks(2).map(|c| [c[0], c[1]]).collect()
}

/// Tape handles for one decoded trajectory set.
#[derive(Clone, Copy, Debug)]
pub struct DecodedModes {
    /// `[n_modes × 2H]`, rows are flattened `(x, y)` waypoints.
    pub waypoints: Var,
    /// `[1 × n_modes]`.
    pub logits: Var,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Planner {
    pub config: PlannerConfig,
    pub scene_queries: ParamId,
    pub view_proj: Linear,
    pub encoder: AttentionBlock,
    pub traj_queries: ParamId,
    pub decoder: Vec<AttentionBlock>,
    pub traj_head: Mlp,
    pub score_head: Mlp,
    pub anchors: Vec<Vec<Vec<Point>>>,
}

impl Planner {
    pub fn new<R: Rng + ?Sized>(config: PlannerConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if config.n_modes == 0 || config.n_commands != Command::ALL.len() || config.depth == 0 {
            return Err(Error::Config(format!("invalid planner config {config:?}")));
        }
        let d = config.d_model;
        let scene_queries = store.xavier("planner.scene_queries", config.n_scene_queries, d, rng);
        let view_proj = Linear::new(store, "planner.view_proj", config.obs_dim, d, rng);
        let encoder = AttentionBlock::new(store, "planner.encoder", d, d, rng);
        let traj_queries =
            store.xavier("planner.traj_queries", config.n_commands * config.n_modes, d, rng);
        let decoder = (0..config.depth)
            .map(|i| AttentionBlock::new(store, &format!("planner.decoder{i}"), d, d, rng))
            .collect();
        let traj_head = Mlp::new(store, "planner.traj_head", (d, d, 2 * HORIZON), rng);
        let score_head = Mlp::new(store, "planner.score_head", (d, d, 1), rng);
        let anchors = Command::ALL
            .iter()
            .map(|&c| anchor_templates(c, config.n_modes))
            .collect();
        Ok(Self {
            config,
            scene_queries,
            view_proj,
            encoder,
            traj_queries,
            decoder,
            traj_head,
            score_head,
            anchors,
        })
    }

    pub fn observation_tensor(&self, features: &[Vec<f64>]) -> Result<Tensor> {
        let c = &self.config;
        if features.len() != c.n_views || features.iter().any(|f| f.len() != c.obs_dim) {
            return Err(Error::Shape {
                op: "observation",
                lhs: vec![features.len(), features.first().map_or(0, Vec::len)],
                rhs: vec![c.n_views, c.obs_dim],
            });
        }
        Tensor::from_rows(features)
    }

    /// Scene queries after cross-attending to the projected views.
    pub fn encode_scene(&self, g: &mut Graph, p: &ParamStore, features: &[Vec<f64>]) -> Result<Var> {
        let obs = g.constant(self.observation_tensor(features)?);
        let views = self.view_proj.forward(g, p, obs)?;
        let queries = g.param(p, self.scene_queries);
        self.encoder.forward(g, p, queries, views)
    }

    /// Anchors plus scaled residuals, before the step clamp.
    pub fn decode_raw(&self, g: &mut Graph, p: &ParamStore, scene: Var, command: Command) -> Result<DecodedModes> {
        let n = self.config.n_modes;
        let all = g.param(p, self.traj_queries);
        let mut q = g.slice_rows(all, command.index() * n, n)?;
        for block in &self.decoder {
            q = block.forward(g, p, q, scene)?;
        }
        let residual = self.traj_head.forward(g, p, q)?;
        let residual = g.scale(residual, RESIDUAL_SCALE);
        let anchors = self.anchor_tensor(command);
        let anchors = g.constant(anchors);
        let waypoints = g.add(anchors, residual)?;
        let scores = self.score_head.forward(g, p, q)?;
        let logits = g.transpose(scores);
        Ok(DecodedModes { waypoints, logits })
    }

    /// [`Planner::decode_raw`] with every step clamped to `v_max·dt`. The
    /// clamp passes gradients straight through.
    pub fn decode(&self, g: &mut Graph, p: &ParamStore, scene: Var, command: Command) -> Result<DecodedModes> {
        let n = self.config.n_modes;
        let DecodedModes { waypoints: raw, logits } = self.decode_raw(g, p, scene, command)?;
        let max_step = self.config.v_max * DT;
        let clamped: Vec<f64> = g
            .value(raw)
            .data()
            .chunks(2 * HORIZON)
            .flat_map(|row| flatten_points(&clamp_steps(&unflatten_points(row), max_step)))
            .collect();
        let waypoints = g.straight_through(raw, Tensor::matrix(n, 2 * HORIZON, clamped)?)?;
        Ok(DecodedModes { waypoints, logits })
    }

    pub fn anchor_tensor(&self, command: Command) -> Tensor {
        let rows: Vec<Vec<f64>> = self.anchors[command.index()]
            .iter()
            .map(|a| flatten_points(a))
            .collect();
        Tensor::from_rows(&rows).expect("anchor rows are uniform")
    }

    pub fn trajectory_set(&self, g: &Graph, decoded: &DecodedModes, command: Command) -> TrajectorySet {
        let wps = g.value(decoded.waypoints);
        let logits = g.value(decoded.logits);
        let modes = (0..self.config.n_modes)
            .map(|i| TrajectoryMode {
                waypoints: unflatten_points(wps.row_slice(i)),
                score_logit: logits.data()[i],
            })
            .collect();
        TrajectorySet {
            modes,
            command,
            anchors: self.anchors[command.index()].clone(),
        }
    }

    /// Inference: encode, decode, and return the set (no world model involved).
    pub fn plan(&self, p: &ParamStore, features: &[Vec<f64>], command: Command) -> Result<TrajectorySet> {
        let mut g = Graph::new();
        let scene = self.encode_scene(&mut g, p, features)?;
        let decoded = self.decode(&mut g, p, scene, command)?;
        Ok(self.trajectory_set(&g, &decoded, command))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn planner() -> (Planner, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Planner::new(PlannerConfig::default(), &mut store, &mut rng).unwrap();
        (p, store)
    }

    fn features(seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..VIEW_COUNT)
            .map(|_| (0..32).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn argmax_rules() {
        assert_eq!(argmax_index(&[0.1, 2.0, -1.0]), Some(1));
        assert_eq!(argmax_index(&[0.5; 4]), Some(0));
        assert_eq!(argmax_index(&[5.1, 7.0, 4.0]), Some(1));
        assert_eq!(argmax_index(&[]), None);
    }

    #[test]
    fn empty_set_is_contract_error() {
        let set = TrajectorySet {
            modes: vec![],
            command: Command::Straight,
            anchors: vec![],
        };
        assert!(matches!(select_output(&set), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_trajectory_head_reproduces_anchors() {
        let (planner, mut store) = planner();
        planner.traj_head.out.zero(&mut store);
        for cmd in Command::ALL {
            let set = planner.plan(&store, &features(3), cmd).unwrap();
            for (mode, anchor) in set.modes.iter().zip(&set.anchors) {
                assert_eq!(&mode.waypoints, anchor);
            }
        }
    }

    #[test]
    fn zero_score_head_selects_first_mode() {
        let (planner, mut store) = planner();
        planner.score_head.out.zero(&mut store);
        let set = planner.plan(&store, &features(4), Command::Left).unwrap();
        assert!(set.logits().iter().all(|&l| l == 0.0));
        assert_eq!(select_output(&set).unwrap().0, 0);
    }

    #[test]
    fn zero_output_projections_leave_scene_queries_unchanged() {
        let (planner, mut store) = planner();
        planner.encoder.zero_residuals(&mut store);
        let mut g = Graph::new();
        let scene = planner.encode_scene(&mut g, &store, &features(5)).unwrap();
        assert_eq!(g.value(scene), store.get(planner.scene_queries));
    }

    #[test]
    fn identical_views_collapse_attention() {
        let (planner, store) = planner();
        let one = features(6).remove(0);
        let same = vec![one.clone(), one.clone()];
        let mut g = Graph::new();
        let scene = planner.encode_scene(&mut g, &store, &same).unwrap();

        // the same block with a single-view context must match
        let mut g1 = Graph::new();
        let obs = g1.constant(Tensor::row(one));
        let v = planner.view_proj.forward(&mut g1, &store, obs).unwrap();
        let q = g1.param(&store, planner.scene_queries);
        let single = planner.encoder.forward(&mut g1, &store, q, v).unwrap();
        assert!(g.value(scene).max_abs_diff(g1.value(single)) < 1e-12);
    }

    #[test]
    fn wrong_feature_width_is_shape_error() {
        let (planner, store) = planner();
        let bad = vec![vec![0.0; 31]; VIEW_COUNT];
        assert!(matches!(
            planner.plan(&store, &bad, Command::Straight),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn anchors_respect_step_bound_and_order() {
        for cmd in Command::ALL {
            let anchors = anchor_templates(cmd, 6);
            assert_eq!(anchors.len(), 6);
            for a in &anchors {
                assert_eq!(a.len(), HORIZON);
                assert_eq!(&clamp_steps(a, 20.0 * DT), a);
            }
        }
        let straight = anchor_templates(Command::Straight, 6);
        assert!(straight[0].iter().all(|p| p[1] == 0.0));
        assert!(straight[2][HORIZON - 1][1] > straight[1][HORIZON - 1][1]);
        assert!(straight[5][HORIZON - 1][0] < straight[0][HORIZON - 1][0]);
    }

    #[test]
    fn refined_modes_stay_within_clamp() {
        let (planner, mut store) = planner();
        // inflate the head so raw residuals exceed the bound
        let out = planner.traj_head.out.weight;
        store.get_mut(out).data_mut().iter_mut().for_each(|w| *w *= 40.0);
        let max_step = planner.config.v_max * DT;
        for seed in 0..20 {
            let set = planner.plan(&store, &features(seed), Command::Straight).unwrap();
            for m in &set.modes {
                let mut prev = [0.0, 0.0];
                for p in &m.waypoints {
                    let step = ((p[0] - prev[0]).powi(2) + (p[1] - prev[1]).powi(2)).sqrt();
                    assert!(step <= max_step + 1e-9, "{step}");
                    prev = *p;
                }
            }
        }
    }
}
