//! Training-time mode selection: angular stability of a rollout's velocity
//! sequence, the weighted per-mode criterion, and its argmin.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::flow::{VelocitySequence, WorldModel};
use crate::planner::TrajectorySet;
use crate::sim::Point;

/// Dot products this close to ±1 are snapped, so numerically collinear
/// directions score exactly 0 (or π).
const COLLINEAR_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionWeights {
    pub lambda_rec: f64,
    pub lambda_traj: f64,
    pub lambda_theta: f64,
}

impl Default for SelectionWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_traj: 1.0,
            lambda_theta: 0.5,
        }
    }
}

impl SelectionWeights {
    pub fn new(lambda_rec: f64, lambda_traj: f64, lambda_theta: f64) -> Result<Self> {
        let w = Self {
            lambda_rec,
            lambda_traj,
            lambda_theta,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_rec, self.lambda_traj, self.lambda_theta];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) || all.iter().all(|w| *w == 0.0) {
            return Err(Error::Config(format!(
                "selection weights must be >= 0 with at least one positive, got {all:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeAssessment {
    pub traj_err: f64,
    pub rec_err: f64,
    pub stability: f64,
    pub criterion: f64,
}

impl ModeAssessment {
    pub fn new(traj_err: f64, rec_err: f64, stability: f64, w: &SelectionWeights) -> Result<Self> {
        Ok(Self {
            traj_err,
            rec_err,
            stability,
            criterion: mode_criterion(traj_err, rec_err, stability, w)?,
        })
    }
}

/// Mean angle between consecutive normalized velocity directions, each
/// velocity flattened to one vector.
///
/// A zero velocity keeps the previous direction and contributes no angle
/// term; the mean is taken over the terms that exist. Fewer than two usable
/// directions give 0.
pub fn stability_score(velocities: &[&[f64]]) -> f64 {
    let mut prev: Option<Vec<f64>> = None;
    let (mut total, mut terms) = (0.0, 0usize);
    for v in velocities {
        let Some(dir) = unit(v) else { continue };
        if let Some(p) = &prev {
            total += angle_of_units(p, &dir);
            terms += 1;
        }
        prev = Some(dir);
    }
    if terms == 0 {
        0.0
    } else {
        total / terms as f64
    }
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm != 0.0 && norm.is_finite()).then(|| v.iter().map(|x| x / norm).collect())
}

fn angle_of_units(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let dot = if dot >= 1.0 - COLLINEAR_TOL {
        1.0
    } else if dot <= -1.0 + COLLINEAR_TOL {
        -1.0
    } else {
        dot
    };
    dot.acos()
}

/// Angle in `[0, π]` between two vectors; `None` when either is zero.
pub fn angle_between(a: &[f64], b: &[f64]) -> Option<f64> {
    Some(angle_of_units(&unit(a)?, &unit(b)?))
}

pub fn sequence_stability(seq: &VelocitySequence) -> f64 {
    stability_score(&seq.flattened())
}

/// `λ_rec·rec + λ_traj·traj + λ_θ·stability`.
pub fn mode_criterion(traj_err: f64, rec_err: f64, stability: f64, w: &SelectionWeights) -> Result<f64> {
    for (name, v) in [("traj_err", traj_err), ("rec_err", rec_err), ("stability", stability)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::contract(format!("{name} must be finite and >= 0, got {v}")));
        }
    }
    Ok(w.lambda_rec * rec_err + w.lambda_traj * traj_err + w.lambda_theta * stability)
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin_index(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

pub fn select_best_mode(assessments: &[ModeAssessment]) -> Result<usize> {
    let criteria: Vec<f64> = assessments.iter().map(|a| a.criterion).collect();
    argmin_index(&criteria).ok_or_else(|| Error::contract("cannot select from zero modes"))
}

/// Mean Euclidean distance between matching waypoints.
pub fn mean_waypoint_error(pred: &[Point], gt: &[Point]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape {
            op: "waypoint_error",
            lhs: vec![pred.len(), 2],
            rhs: vec![gt.len(), 2],
        });
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
        .sum();
    Ok(sum / pred.len() as f64)
}

pub fn mean_squared_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b, "mean_squared_error")?;
    let se: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(se / a.len() as f64)
}

/// Rolls the world model forward under every mode's condition and scores
/// each mode against the ground truth.
#[allow(clippy::too_many_arguments)]
pub fn assess_modes(
    world: &WorldModel,
    params: &ParamStore,
    set: &TrajectorySet,
    z_t: &Tensor,
    pooled: &[f64],
    z_next: &Tensor,
    gt: &[Point],
    w: &SelectionWeights,
) -> Result<(Vec<ModeAssessment>, usize)> {
    let c = &world.config;
    let mut out = Vec::with_capacity(set.modes.len());
    for mode in &set.modes {
        let h = world.fuse_condition(params, pooled, &mode.waypoints, c.lambda_z, c.lambda_t)?;
        let (pred, vels) = world.integrate_future(params, z_t, &h, world.steps())?;
        out.push(ModeAssessment::new(
            mean_waypoint_error(&mode.waypoints, gt)?,
            mean_squared_error(&pred, z_next)?,
            sequence_stability(&vels),
            w,
        )?);
    }
    let best = select_best_mode(&out)?;
    Ok((out, best))
}
