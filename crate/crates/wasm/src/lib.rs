//! Browser bindings for three interactive views: an episode viewer with the
//! expert and constant-velocity plans, an Euler step-count study, and the
//! stability score of user-drawn velocity sequences.
//!
//! Each binding returns a JSON string; the plain Rust functions behind them
//! are public so they can be tested natively.

use latentflow::autodiff::Tensor;
use latentflow::flow::{euler_integrate, make_anchor, TargetConvention};
use latentflow::selection::{angle_between, stability_score};
use latentflow::sim::{
    check_collision, ego_to_world, generate_episode, lane_center, road_half_width, Observer, ObserverConfig, Point,
    ScenarioConfig, DT, EGO_RADIUS, HORIZON, LANE_COUNT,
};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct ObstacleView {
    pub kind: String,
    pub radius: f64,
    pub trajectory: Vec<Point>,
}

#[derive(Debug, Serialize)]
pub struct TickView {
    pub ego: Point,
    pub heading: f64,
    pub speed: f64,
    pub command: String,
    /// World-frame plans; empty past the last plannable tick.
    pub expert: Vec<Point>,
    pub constant_velocity: Vec<Point>,
    /// Horizon index of the constant-velocity plan's first collision.
    pub cv_collision: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct EpisodeView {
    pub id: String,
    pub dt: f64,
    pub ego_radius: f64,
    pub road_half_width: f64,
    pub lane_centers: Vec<f64>,
    pub obstacles: Vec<ObstacleView>,
    pub ticks: Vec<TickView>,
}

pub fn episode_view(seed: u64, scenario: &str) -> latentflow::Result<EpisodeView> {
    let sc = ScenarioConfig::by_name(scenario)?;
    let ep = generate_episode(seed, &sc, &Observer::new(ObserverConfig::default()))?;
    let plannable = ep.plannable_ticks();
    let ticks = (0..ep.ticks)
        .map(|t| {
            let pose = &ep.ego[t];
            let (expert, cv, hit) = if plannable.contains(&t) {
                let cv_ego: Vec<Point> = (1..=HORIZON).map(|i| [pose.speed * DT * i as f64, 0.0]).collect();
                let hit = check_collision(&cv_ego, &ep, t)?;
                (
                    ep.expert_trajectory[t].iter().map(|&p| ego_to_world(pose, p)).collect(),
                    cv_ego.iter().map(|&p| ego_to_world(pose, p)).collect(),
                    hit,
                )
            } else {
                (Vec::new(), Vec::new(), None)
            };
            Ok(TickView {
                ego: pose.position(),
                heading: pose.heading,
                speed: pose.speed,
                command: ep.commands[t].as_str().to_string(),
                expert,
                constant_velocity: cv,
                cv_collision: hit,
            })
        })
        .collect::<latentflow::Result<Vec<_>>>()?;
    Ok(EpisodeView {
        id: ep.id.clone(),
        dt: DT,
        ego_radius: EGO_RADIUS,
        road_half_width: road_half_width(),
        lane_centers: (0..LANE_COUNT).map(lane_center).collect(),
        obstacles: ep
            .obstacles
            .iter()
            .map(|o| ObstacleView {
                kind: serde_json::to_value(o.kind)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default(),
                radius: o.radius,
                trajectory: o.trajectory.clone(),
            })
            .collect(),
        ticks,
    })
}

#[derive(Debug, Serialize, PartialEq)]
pub struct StepRow {
    pub k: usize,
    /// Max-norm error of Euler on `dz/ds = z` against `e·z0`.
    pub linear_error: f64,
    /// Error at the previous K divided by this one.
    pub ratio: Option<f64>,
    /// Fraction of `z_next − a` covered when integrating each target
    /// velocity convention exactly from the anchor.
    pub literal_fraction: f64,
    pub derivative_fraction: f64,
}

/// Euler rollouts for `K = 1, 2, 4, …, 2^max_doublings`.
pub fn step_study(max_doublings: u32) -> latentflow::Result<Vec<StepRow>> {
    let z0 = Tensor::row(vec![1.0, -0.5, 2.0]);
    let exact = z0.map(|x| x * std::f64::consts::E);
    let z_next = Tensor::row(vec![2.0, 1.0, -1.0]);
    let anchor = make_anchor(&z0, 0.3, 11)?.a;
    let gap = z_next.zip_map(&anchor, |a, b| a - b)?;
    let fraction = |conv: TargetConvention, k: usize| -> latentflow::Result<f64> {
        let (z, _) = euler_integrate(&anchor, k, |_, s| {
            Ok(match conv {
                TargetConvention::PaperLiteral => gap.map(|g| (1.0 - s) * g),
                TargetConvention::PathDerivative => gap.clone(),
            })
        })?;
        let moved = z.zip_map(&anchor, |a, b| a - b)?;
        Ok(moved.dot(&gap) / gap.dot(&gap))
    };
    let mut rows: Vec<StepRow> = Vec::new();
    for d in 0..=max_doublings.min(12) {
        let k = 1usize << d;
        let (z, _) = euler_integrate(&z0, k, |z, _| Ok(z.clone()))?;
        let err = z.max_abs_diff(&exact);
        rows.push(StepRow {
            k,
            linear_error: err,
            ratio: rows.last().map(|r| r.linear_error / err),
            literal_fraction: fraction(TargetConvention::PaperLiteral, k)?,
            derivative_fraction: fraction(TargetConvention::PathDerivative, k)?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Serialize, PartialEq)]
pub struct StabilityView {
    pub score: f64,
    /// Angle between consecutive velocities; `null` where one is zero.
    pub angles: Vec<Option<f64>>,
}

/// Stability score of a velocity sequence given as JSON `[[x, y], …]`.
pub fn stability_view(velocities: &str) -> Result<StabilityView, String> {
    let v: Vec<Vec<f64>> = serde_json::from_str(velocities).map_err(|e| e.to_string())?;
    if v.iter().any(|x| x.iter().any(|c| !c.is_finite())) {
        return Err("velocities must be finite".into());
    }
    let slices: Vec<&[f64]> = v.iter().map(Vec::as_slice).collect();
    Ok(StabilityView {
        score: stability_score(&slices),
        angles: slices.windows(2).map(|w| angle_between(w[0], w[1])).collect(),
    })
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = episodeView)]
pub fn episode_view_js(seed: u32, scenario: &str) -> Result<String, JsError> {
    to_json(&episode_view(seed.into(), scenario).map_err(|e| JsError::new(&e.to_string()))?)
}

#[wasm_bindgen(js_name = stepStudy)]
pub fn step_study_js(max_doublings: u32) -> Result<String, JsError> {
    to_json(&step_study(max_doublings).map_err(|e| JsError::new(&e.to_string()))?)
}

#[wasm_bindgen(js_name = stabilityView)]
pub fn stability_view_js(velocities: &str) -> Result<String, JsError> {
    to_json(&stability_view(velocities).map_err(|e| JsError::new(&e))?)
}
