//! Trajectory-conditioned latent dynamics: world-feature extraction, noised
//! anchors, straight-line interpolation, the velocity network and Euler
//! rollout.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{sinusoidal_embedding, AttentionBlock, Linear, Mlp};
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::planner::flatten_points;
use crate::sim::{Point, HORIZON};

/// Waypoints are divided by this before the trajectory embedding.
const WAYPOINT_SCALE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetConvention {
    /// `(1 − s)(z_next − a)`.
    PaperLiteral,
    /// `z_next − a`, the derivative of the interpolation path.
    PathDerivative,
}

impl std::str::FromStr for TargetConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_literal" => Ok(Self::PaperLiteral),
            "path_derivative" => Ok(Self::PathDerivative),
            other => Err(Error::Config(format!("unknown target convention '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaPolicy {
    /// Drawn per sample from `U(0, max)`.
    Uniform { max: f64 },
    Fixed { value: f64 },
}

impl AlphaPolicy {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            AlphaPolicy::Uniform { max } => rng.random::<f64>() * max,
            AlphaPolicy::Fixed { value } => value,
        }
    }

    fn validate(&self) -> Result<()> {
        let v = match *self {
            AlphaPolicy::Uniform { max } => max,
            AlphaPolicy::Fixed { value } => value,
        };
        if (0.0..=1.0).contains(&v) {
            Ok(())
        } else {
            Err(Error::Config(format!("alpha must lie in [0, 1], got {v}")))
        }
    }
}

/// Which latent dynamics model is attached to the planner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldModelKind {
    /// No world model: selection uses trajectory error only.
    None,
    /// One-step residual regression of the next latent.
    Static,
    /// Flow-matching velocity field integrated with Euler steps.
    Flow,
}

impl std::str::FromStr for WorldModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "static" => Ok(Self::Static),
            "flow" => Ok(Self::Flow),
            other => Err(Error::Config(format!("unknown world model '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub kind: WorldModelKind,
    #[serde(rename = "K")]
    pub k: usize,
    pub alpha: AlphaPolicy,
    pub target_convention: TargetConvention,
    pub lambda_z: f64,
    pub lambda_t: f64,
    /// Trajectory embedding width.
    pub d_traj: usize,
    /// Velocity-network token width.
    pub width: usize,
    pub depth: usize,
    pub time_dim: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            kind: WorldModelKind::Flow,
            k: 5,
            alpha: AlphaPolicy::Uniform { max: 0.5 },
            target_convention: TargetConvention::PaperLiteral,
            lambda_z: 1.0,
            lambda_t: 1.0,
            d_traj: 32,
            width: 64,
            depth: 2,
            time_dim: 16,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("flow.K must be at least 1".into()));
        }
        if !(self.lambda_z > 0.0 && self.lambda_t > 0.0) {
            return Err(Error::Config("flow.lambda_z and flow.lambda_t must be > 0".into()));
        }
        if self.d_traj == 0 || self.width == 0 || self.depth == 0 || self.time_dim < 2 {
            return Err(Error::Config("flow network dimensions must be positive".into()));
        }
        self.alpha.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldLatent {
    pub z: Tensor,
    pub timestep: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorState {
    pub a: Tensor,
    pub alpha: f64,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub x_s: Tensor,
    pub s: f64,
    pub target_velocity: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionEmbedding {
    pub h: Vec<f64>,
    pub lambda_z: f64,
    pub lambda_t: f64,
    /// Width of the latent part, which comes first in `h`.
    pub latent_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocitySequence {
    pub velocities: Vec<Tensor>,
    pub step_size: f64,
}

impl VelocitySequence {
    pub fn len(&self) -> usize {
        self.velocities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocities.is_empty()
    }

    pub fn flattened(&self) -> Vec<&[f64]> {
        self.velocities.iter().map(Tensor::data).collect()
    }
}

/// Standard-normal tensor drawn from a dedicated seeded stream.
pub fn seeded_noise(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("positive noise shape")
}

/// `a = (1 − α)·z + α·ε` with `ε` drawn from `seed`.
pub fn make_anchor(z: &Tensor, alpha: f64, seed: u64) -> Result<AnchorState> {
    let eps = seeded_noise(z.rows(), z.cols(), seed);
    Ok(AnchorState {
        a: anchor_from_noise(z, &eps, alpha)?,
        alpha,
        noise_seed: seed,
    })
}

/// `(1 − α)·z + α·ε`; the endpoints return `z` and `ε` untouched.
pub fn anchor_from_noise(z: &Tensor, eps: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    z.expect_same_shape(eps, "make_anchor")?;
    Ok(if alpha == 0.0 {
        z.clone()
    } else if alpha == 1.0 {
        eps.clone()
    } else {
        z.zip_map(eps, |zv, ev| (1.0 - alpha) * zv + alpha * ev)?
    })
}

/// `x_s = (1 − s)·a + s·z_next` with the configured regression target.
pub fn interpolate(
    anchor: &AnchorState,
    z_next: &Tensor,
    s: f64,
    convention: TargetConvention,
) -> Result<FlowSample> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::contract(format!("flow time must lie in [0, 1], got {s}")));
    }
    let a = &anchor.a;
    a.expect_same_shape(z_next, "interpolate")?;
    let x_s = if s == 0.0 {
        a.clone()
    } else if s == 1.0 {
        z_next.clone()
    } else {
        a.zip_map(z_next, |av, zv| (1.0 - s) * av + s * zv)?
    };
    let gain = match convention {
        TargetConvention::PaperLiteral => 1.0 - s,
        TargetConvention::PathDerivative => 1.0,
    };
    let target_velocity = z_next.zip_map(a, |zv, av| gain * (zv - av))?;
    Ok(FlowSample {
        x_s,
        s,
        target_velocity,
    })
}

/// Explicit Euler from `z0` over `s ∈ [0, 1]` in `k` steps of `1/k`,
/// evaluating the field at `s_j = j/k`.
pub fn euler_integrate<F>(z0: &Tensor, k: usize, mut field: F) -> Result<(Tensor, VelocitySequence)>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if k == 0 {
        return Err(Error::contract("Euler integration needs K >= 1"));
    }
    let ds = 1.0 / k as f64;
    let mut z = z0.clone();
    let mut velocities = Vec::with_capacity(k);
    for j in 0..k {
        let v = field(&z, j as f64 / k as f64)?;
        z = z.zip_map(&v, |zv, vv| zv + ds * vv)?;
        velocities.push(v);
    }
    Ok((
        z,
        VelocitySequence {
            velocities,
            step_size: ds,
        },
    ))
}

/// Mean squared error between predicted and target velocities, averaged
/// over samples.
pub fn flow_matching_loss_with<F>(samples: &[FlowSample], mut predict: F) -> Result<f64>
where
    F: FnMut(&FlowSample) -> Result<Tensor>,
{
    if samples.is_empty() {
        return Err(Error::contract("flow matching loss needs at least one sample"));
    }
    let mut total = 0.0;
    for sample in samples {
        let pred = predict(sample)?;
        pred.expect_same_shape(&sample.target_velocity, "flow_matching_loss")?;
        let se: f64 = pred
            .data()
            .iter()
            .zip(sample.target_velocity.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        total += se / pred.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Transformer velocity field `F(x_s, s, h)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VelocityNet {
    pub in_proj: Linear,
    pub positions: ParamId,
    pub time_proj: Linear,
    pub cond_proj: Linear,
    pub blocks: Vec<AttentionBlock>,
    pub out: Linear,
    pub time_dim: usize,
}

impl VelocityNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        tokens: usize,
        latent_dim: usize,
        cond_dim: usize,
        width: usize,
        depth: usize,
        time_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            in_proj: Linear::new(store, &format!("{name}.in"), latent_dim, width, rng),
            positions: store.xavier(format!("{name}.positions"), tokens, width, rng),
            time_proj: Linear::new(store, &format!("{name}.time"), time_dim, width, rng),
            cond_proj: Linear::new(store, &format!("{name}.cond"), cond_dim, width, rng),
            blocks: (0..depth)
                .map(|i| AttentionBlock::new(store, &format!("{name}.block{i}"), width, width, rng))
                .collect(),
            out: Linear::new(store, &format!("{name}.out"), width, latent_dim, rng),
            time_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamStore, x: Var, s: f64, h: Var) -> Result<Var> {
        let tokens = self.in_proj.forward(g, p, x)?;
        let pos = g.param(p, self.positions);
        let tokens = g.add(tokens, pos)?;
        let temb = g.constant(sinusoidal_embedding(s, self.time_dim));
        let t = self.time_proj.forward(g, p, temb)?;
        let c = self.cond_proj.forward(g, p, h)?;
        let ctx = g.add(t, c)?;
        let mut x = g.add_row(tokens, ctx)?;
        for block in &self.blocks {
            x = block.forward(g, p, x, x)?;
        }
        self.out.forward(g, p, x)
    }
}

/// Outputs of world-feature extraction on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Extracted {
    /// `[n_q × D]` world latent.
    pub z: Var,
    /// `[1 × D]` mean of the projected per-view latents.
    pub pooled: Var,
}

/// One mode's graph-level rollout.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub prediction: Var,
    pub velocities: Vec<Var>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WorldModel {
    pub config: FlowConfig,
    pub view_mlp: Mlp,
    pub cross: AttentionBlock,
    pub traj_emb: Mlp,
    pub velocity: VelocityNet,
    pub latent_dim: usize,
    pub tokens: usize,
    pub views: usize,
    #[serde(skip)]
    calls: AtomicUsize,
}

impl Clone for WorldModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            view_mlp: self.view_mlp.clone(),
            cross: self.cross.clone(),
            traj_emb: self.traj_emb.clone(),
            velocity: self.velocity.clone(),
            latent_dim: self.latent_dim,
            tokens: self.tokens,
            views: self.views,
            calls: AtomicUsize::new(self.flow_calls()),
        }
    }
}

impl WorldModel {
    pub fn new<R: Rng + ?Sized>(
        config: FlowConfig,
        obs_dim: usize,
        views: usize,
        tokens: usize,
        latent_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = latent_dim;
        let view_mlp = Mlp::new(store, "world.view_mlp", (obs_dim, d, d), rng);
        let cross = AttentionBlock::new(store, "world.cross", d, d, rng);
        let traj_emb = Mlp::new(
            store,
            "world.traj_emb",
            (2 * HORIZON, config.d_traj, config.d_traj),
            rng,
        );
        let velocity = VelocityNet::new(
            store,
            "world.velocity",
            tokens,
            d,
            d + config.d_traj,
            config.width,
            config.depth,
            config.time_dim,
            rng,
        );
        Ok(Self {
            config,
            view_mlp,
            cross,
            traj_emb,
            velocity,
            latent_dim,
            tokens,
            views,
            calls: AtomicUsize::new(0),
        })
    }

    /// Number of velocity-network evaluations since construction or reset.
    pub fn flow_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_flow_calls(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn cond_dim(&self) -> usize {
        self.latent_dim + self.config.d_traj
    }

    /// Projects each view, then lets the scene queries attend over them.
    pub fn extract(&self, g: &mut Graph, p: &ParamStore, raw: Var, scene: Var) -> Result<Extracted> {
        let rv = g.value(raw);
        if rv.rows() != self.views {
            return Err(Error::Shape {
                op: "extract_world_features",
                lhs: rv.shape().to_vec(),
                rhs: vec![self.views, rv.cols()],
            });
        }
        let views = self.view_mlp.forward(g, p, raw)?;
        let z = self.cross.forward(g, p, scene, views)?;
        let pooled = g.mean_rows(views);
        Ok(Extracted { z, pooled })
    }

    /// `h = [λ_z·pooled, λ_T·TrajEmb(waypoints / 10)]` on a tape.
    pub fn condition(&self, g: &mut Graph, p: &ParamStore, pooled: Var, waypoints: Var) -> Result<Var> {
        self.condition_with(g, p, pooled, waypoints, self.config.lambda_z, self.config.lambda_t)
    }

    pub fn condition_with(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        pooled: Var,
        waypoints: Var,
        lambda_z: f64,
        lambda_t: f64,
    ) -> Result<Var> {
        let w = g.scale(waypoints, 1.0 / WAYPOINT_SCALE);
        let emb = self.traj_emb.forward(g, p, w)?;
        let zl = g.scale(pooled, lambda_z);
        let tl = g.scale(emb, lambda_t);
        g.concat_cols(&[zl, tl])
    }

    /// Value-level condition for one mode.
    pub fn fuse_condition(
        &self,
        p: &ParamStore,
        pooled: &[f64],
        waypoints: &[Point],
        lambda_z: f64,
        lambda_t: f64,
    ) -> Result<ConditionEmbedding> {
        if waypoints.len() != HORIZON || pooled.len() != self.latent_dim {
            return Err(Error::Shape {
                op: "fuse_condition",
                lhs: vec![pooled.len(), waypoints.len()],
                rhs: vec![self.latent_dim, HORIZON],
            });
        }
        let mut g = Graph::new();
        let pv = g.constant(Tensor::row(pooled.to_vec()));
        let wv = g.constant(Tensor::row(flatten_points(waypoints)));
        let h = self.condition_with(&mut g, p, pv, wv, lambda_z, lambda_t)?;
        Ok(ConditionEmbedding {
            h: g.value(h).data().to_vec(),
            lambda_z,
            lambda_t,
            latent_dim: self.latent_dim,
        })
    }

    /// `F(x_s, s, h)` on a tape; counts one invocation.
    pub fn velocity_on(&self, g: &mut Graph, p: &ParamStore, x: Var, s: f64, h: Var) -> Result<Var> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::contract(format!("flow time must lie in [0, 1], got {s}")));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.velocity.forward(g, p, x, s, h)
    }

    pub fn predict_velocity(
        &self,
        p: &ParamStore,
        x_s: &Tensor,
        s: f64,
        h: &ConditionEmbedding,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(x_s.clone());
        let hv = g.constant(Tensor::row(h.h.clone()));
        let v = self.velocity_on(&mut g, p, x, s, hv)?;
        Ok(g.value(v).clone())
    }

    /// Number of integration steps the configured model actually takes.
    pub fn steps(&self) -> usize {
        match self.config.kind {
            WorldModelKind::Flow => self.config.k,
            WorldModelKind::Static | WorldModelKind::None => 1,
        }
    }

    /// Euler rollout from `z_t`; the static model is a single residual step.
    pub fn integrate_future(
        &self,
        p: &ParamStore,
        z_t: &Tensor,
        h: &ConditionEmbedding,
        k: usize,
    ) -> Result<(Tensor, VelocitySequence)> {
        euler_integrate(z_t, k, |z, s| self.predict_velocity(p, z, s, h))
    }

    /// Graph-level rollout used in training so the reconstruction loss can
    /// backpropagate through every step.
    pub fn rollout(&self, g: &mut Graph, p: &ParamStore, z_t: Var, h: Var, k: usize) -> Result<Rollout> {
        if k == 0 {
            return Err(Error::contract("Euler integration needs K >= 1"));
        }
        let ds = 1.0 / k as f64;
        let mut z = z_t;
        let mut velocities = Vec::with_capacity(k);
        for j in 0..k {
            let v = self.velocity_on(g, p, z, j as f64 / k as f64, h)?;
            let step = g.scale(v, ds);
            z = g.add(z, step)?;
            velocities.push(v);
        }
        Ok(Rollout {
            prediction: z,
            velocities,
        })
    }

    /// Flow-matching loss on a tape: one anchor, one `s` and one noise draw
    /// per condition. Latents are constants; the conditions keep their
    /// gradient path into the trajectory embedding.
    pub fn flow_loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &ParamStore,
        items: &[(&Tensor, &Tensor, Var)],
        rng: &mut R,
    ) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::contract("flow matching loss needs at least one sample"));
        }
        let mut terms = Vec::with_capacity(items.len());
        for &(z_t, z_next, h) in items {
            let term = match self.config.kind {
                WorldModelKind::Static => {
                    let x = g.constant(z_t.clone());
                    let v = self.velocity_on(g, p, x, 0.0, h)?;
                    let pred = g.add(x, v)?;
                    let target = g.constant(z_next.clone());
                    g.mse(pred, target)?
                }
                _ => {
                    let alpha = self.config.alpha.sample(rng);
                    let seed: u64 = rng.random();
                    let s: f64 = rng.random();
                    let anchor = make_anchor(z_t, alpha, seed)?;
                    let sample = interpolate(&anchor, z_next, s, self.config.target_convention)?;
                    let x = g.constant(sample.x_s);
                    let v = self.velocity_on(g, p, x, s, h)?;
                    let target = g.constant(sample.target_velocity);
                    g.mse(v, target)?
                }
            };
            terms.push(term);
        }
        let stacked = g.concat_cols(&terms)?;
        Ok(g.mean(stacked))
    }
}
