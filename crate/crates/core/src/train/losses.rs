use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

use super::config::LossWeights;

/// Scalar values of the four objective terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossComponents {
    pub traj: f64,
    pub score: f64,
    pub rec: f64,
    pub flow: f64,
    pub total: f64,
}

impl LossComponents {
    /// `traj + λ_score·score + λ_rec·rec + λ_flow·flow`, evaluated left to
    /// right exactly as the tape does.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.traj + w.lambda_score * self.score + w.lambda_rec * self.rec + w.lambda_flow * self.flow
    }
}

/// Builds the weighted objective on the tape after checking each term.
pub fn total_loss(
    g: &mut Graph,
    traj: Var,
    score: Var,
    rec: Var,
    flow: Var,
    w: &LossWeights,
) -> Result<(Var, LossComponents)> {
    let mut parts = [0.0; 4];
    for (i, (name, v)) in [("traj", traj), ("score", score), ("rec", rec), ("flow", flow)]
        .into_iter()
        .enumerate()
    {
        let val = g.value(v);
        if !val.is_scalar() {
            return Err(Error::contract(format!("loss term {name} must be scalar")));
        }
        let x = val.item();
        if !x.is_finite() {
            return Err(Error::NonFinite { component: name, value: x });
        }
        parts[i] = x;
    }
    let s = g.scale(score, w.lambda_score);
    let r = g.scale(rec, w.lambda_rec);
    let f = g.scale(flow, w.lambda_flow);
    let t = g.add(traj, s)?;
    let t = g.add(t, r)?;
    let t = g.add(t, f)?;
    let total = g.value(t).item();
    if !total.is_finite() {
        return Err(Error::NonFinite {
            component: "total",
            value: total,
        });
    }
    Ok((
        t,
        LossComponents {
            traj: parts[0],
            score: parts[1],
            rec: parts[2],
            flow: parts[3],
            total,
        },
    ))
}

/// Mean absolute error between mode `n_star` (or every mode) and the
/// flattened ground truth.
pub fn trajectory_loss(
    g: &mut Graph,
    waypoints: Var,
    gt_flat: &[f64],
    n_star: usize,
    all_modes: bool,
) -> Result<Var> {
    let wv = g.value(waypoints);
    let (n, width) = (wv.rows(), wv.cols());
    if gt_flat.len() != width {
        return Err(Error::Shape {
            op: "trajectory_loss",
            lhs: vec![n, width],
            rhs: vec![1, gt_flat.len()],
        });
    }
    let (pred, target) = if all_modes {
        let rows = vec![gt_flat.to_vec(); n];
        (waypoints, Tensor::from_rows(&rows)?)
    } else {
        if n_star >= n {
            return Err(Error::Bounds {
                what: "mode index",
                index: n_star,
                len: n,
            });
        }
        (g.slice_rows(waypoints, n_star, 1)?, Tensor::row(gt_flat.to_vec()))
    };
    let target = g.constant(target);
    let diff = g.sub(pred, target)?;
    let abs = g.abs(diff);
    Ok(g.mean(abs))
}

/// Cross-entropy of the mode logits against `n_star`.
pub fn score_loss(g: &mut Graph, logits: Var, n_star: usize) -> Result<Var> {
    g.cross_entropy(logits, n_star)
}

/// Mean squared error against a detached target.
pub fn reconstruction_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let pv = g.value(pred);
    if pv.shape() != target.shape() {
        return Err(Error::Shape {
            op: "reconstruction_loss",
            lhs: pv.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let t = g.constant(target.clone());
    g.mse(pred, t)
}
