//! Open-loop planning metrics and the inference-only evaluation loop.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::planner::select_output;
use crate::sim::{
    check_collision, discs_overlap, ego_to_world, road_half_width, Dataset, Episode, Point, DT,
    EGO_RADIUS, HORIZON,
};

/// Waypoint counts covered by the 1 s, 2 s and 3 s horizons.
pub const HORIZON_STEPS: [usize; 3] = [2, 4, 6];
const TTC_THRESHOLD: f64 = 1.0;
const TTC_PROBE: f64 = 0.1;
const MAX_ACCEL: f64 = 4.0;
const MAX_JERK: f64 = 8.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Horizons {
    #[serde(rename = "1s")]
    pub h1: f64,
    #[serde(rename = "2s")]
    pub h2: f64,
    #[serde(rename = "3s")]
    pub h3: f64,
}

impl Horizons {
    pub fn from_array(v: [f64; 3]) -> Self {
        Self {
            h1: v[0],
            h2: v[1],
            h3: v[2],
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.h1, self.h2, self.h3]
    }

    pub fn avg(self) -> f64 {
        (self.h1 + self.h2 + self.h3) / 3.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanMetrics {
    pub l2_at: Horizons,
    pub l2_avg: f64,
    /// Percent.
    pub cr_at: Horizons,
    pub cr_avg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdmsSubscores {
    pub nc: f64,
    pub dac: f64,
    pub ep: f64,
    pub ttc: f64,
    pub comfort: f64,
}

/// `NC · DAC · (5·(EP + TTC) + 2·C) / 12`.
pub fn pdms(s: &PdmsSubscores) -> Result<f64> {
    for (name, v) in [
        ("nc", s.nc),
        ("dac", s.dac),
        ("ep", s.ep),
        ("ttc", s.ttc),
        ("comfort", s.comfort),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::contract(format!("subscore {name} must lie in [0, 1], got {v}")));
        }
    }
    Ok(s.nc * s.dac * (5.0 * (s.ep + s.ttc) + 2.0 * s.comfort) / 12.0)
}

fn step_errors(pred: &[Point], gt: &[Point]) -> Result<Vec<f64>> {
    if pred.len() != HORIZON || gt.len() != HORIZON {
        return Err(Error::Shape {
            op: "l2_displacement",
            lhs: vec![pred.len(), 2],
            rhs: vec![gt.len(), 2],
        });
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
        .collect())
}

/// Averages per-step values over every step up to each horizon.
pub fn prefix_means(per_step: &[f64]) -> Horizons {
    let mut out = [0.0; 3];
    for (o, &n) in out.iter_mut().zip(&HORIZON_STEPS) {
        *o = per_step[..n].iter().sum::<f64>() / n as f64;
    }
    Horizons::from_array(out)
}

/// L2 at each horizon: the mean per-step Euclidean error up to that horizon.
pub fn l2_displacement(pred: &[Point], gt: &[Point]) -> Result<Horizons> {
    Ok(prefix_means(&step_errors(pred, gt)?))
}

/// Collision rate in percent. For each run the per-step indicator is 1 from
/// its first collision onward; indicators are prefix-averaged like L2 and
/// then averaged over runs, so each run counts once per horizon.
pub fn collision_rate(runs: &[(&[Point], &Episode, usize)]) -> Result<Horizons> {
    if runs.is_empty() {
        return Err(Error::contract("collision rate needs at least one run"));
    }
    let mut acc = [0.0; 3];
    for &(traj, ep, t) in runs {
        let first = check_collision(traj, ep, t)?;
        let h = prefix_means(&collision_indicators(first));
        for (a, v) in acc.iter_mut().zip(h.to_array()) {
            *a += v;
        }
    }
    let n = runs.len() as f64;
    Ok(Horizons::from_array(acc.map(|a| 100.0 * a / n)))
}

fn collision_indicators(first: Option<usize>) -> Vec<f64> {
    (0..HORIZON)
        .map(|j| match first {
            Some(c) if c <= j => 1.0,
            _ => 0.0,
        })
        .collect()
}

/// Toy stand-ins for the five driving subscores of a single run.
pub fn run_subscores(traj: &[Point], ep: &Episode, t: usize) -> Result<PdmsSubscores> {
    let collided = check_collision(traj, ep, t)?.is_some();
    let pose = &ep.ego[t];
    let world: Vec<Point> = traj.iter().map(|&p| ego_to_world(pose, p)).collect();

    let half = road_half_width();
    let dac = world.iter().filter(|p| p[1].abs() <= half).count() as f64 / traj.len() as f64;

    let gt_end = ep.expert_trajectory[t][HORIZON - 1];
    let gt_len2 = gt_end[0] * gt_end[0] + gt_end[1] * gt_end[1];
    let end = traj[HORIZON - 1];
    let ep_score = if gt_len2 < 1e-6 {
        1.0
    } else {
        ((end[0] * gt_end[0] + end[1] * gt_end[1]) / gt_len2).clamp(0.0, 1.0)
    };

    let ttc_ok = !collided && min_time_to_collision(&world, ep, t) > TTC_THRESHOLD;
    let comfort = comfortable(traj, pose.speed);

    Ok(PdmsSubscores {
        nc: if collided { 0.0 } else { 1.0 },
        dac,
        ep: ep_score,
        ttc: if ttc_ok { 1.0 } else { 0.0 },
        comfort: if comfort { 1.0 } else { 0.0 },
    })
}

/// Smallest constant-velocity extrapolation time (sampled every 0.1 s up
/// to the threshold) at which ego and an obstacle overlap; infinity if none.
fn min_time_to_collision(world: &[Point], ep: &Episode, t: usize) -> f64 {
    let mut prev = ep.ego[t].position();
    let mut best = f64::INFINITY;
    for (i, &p) in world.iter().enumerate() {
        let tick = t + i + 1;
        let ev = [(p[0] - prev[0]) / DT, (p[1] - prev[1]) / DT];
        prev = p;
        for o in &ep.obstacles {
            let op = o.trajectory[tick];
            let ov = o.velocity(tick);
            let mut tau = 0.0;
            while tau <= TTC_THRESHOLD + 1e-9 {
                let e = [p[0] + ev[0] * tau, p[1] + ev[1] * tau];
                let q = [op[0] + ov[0] * tau, op[1] + ov[1] * tau];
                if discs_overlap(e, EGO_RADIUS, q, o.radius) {
                    best = best.min(tau);
                    break;
                }
                tau += TTC_PROBE;
            }
        }
    }
    best
}

fn comfortable(traj: &[Point], v0: f64) -> bool {
    let mut prev = [0.0, 0.0];
    let mut speeds = vec![v0];
    for p in traj {
        speeds.push(((p[0] - prev[0]).powi(2) + (p[1] - prev[1]).powi(2)).sqrt() / DT);
        prev = *p;
    }
    let accel: Vec<f64> = speeds.windows(2).map(|w| (w[1] - w[0]) / DT).collect();
    let accel_ok = accel.iter().all(|a| a.abs() <= MAX_ACCEL);
    let jerk_ok = accel.windows(2).all(|w| ((w[1] - w[0]) / DT).abs() <= MAX_JERK);
    accel_ok && jerk_ok
}

/// What produces the evaluated trajectory.
#[derive(Clone, Copy, Debug)]
pub enum Policy<'a> {
    /// Argmax-score mode of the planner.
    Model(&'a Model),
    /// The expert trajectory itself.
    Expert,
    /// Current speed held straight ahead.
    ConstantVelocity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: String,
    pub runs: usize,
    pub l2_at: Horizons,
    pub collisions: usize,
    pub pdms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub episodes: usize,
    pub runs: usize,
    pub metrics: PlanMetrics,
    pub subscores: PdmsSubscores,
    /// Mean per-run score.
    pub pdms: f64,
    /// Velocity-network evaluations during this evaluation.
    pub flow_calls: usize,
    pub per_episode: Vec<EpisodeRow>,
}

/// Wall-clock inference cost, kept out of the report so reports stay
/// reproducible.
#[derive(Clone, Debug, Default)]
pub struct Timings {
    /// Seconds per episode.
    pub per_episode: Vec<f64>,
}

impl Timings {
    pub fn mean(&self) -> f64 {
        self.per_episode.iter().sum::<f64>() / self.per_episode.len().max(1) as f64
    }
}

fn policy_trajectory(policy: Policy<'_>, ep: &Episode, t: usize) -> Result<Vec<Point>> {
    match policy {
        Policy::Model(model) => {
            let set = model.plan(ep.observe(t)?, ep.commands[t])?;
            let (_, mode) = select_output(&set)?;
            Ok(mode.waypoints.clone())
        }
        Policy::Expert => Ok(ep.expert_trajectory[t].clone()),
        Policy::ConstantVelocity => {
            let v = ep.ego[t].speed;
            Ok((1..=HORIZON).map(|i| [v * DT * i as f64, 0.0]).collect())
        }
    }
}

/// Plans every plannable tick of every episode and aggregates the metrics.
pub fn evaluate(policy: Policy<'_>, data: &Dataset) -> Result<(EvalReport, Timings)> {
    let calls_before = match policy {
        Policy::Model(m) => m.world.flow_calls(),
        _ => 0,
    };
    let mut trajs: Vec<(usize, usize, Vec<Point>)> = Vec::new();
    let mut timings = Timings::default();
    for (i, ep) in data.episodes.iter().enumerate() {
        let start = Instant::now();
        for t in ep.plannable_ticks() {
            trajs.push((i, t, policy_trajectory(policy, ep, t)?));
        }
        timings.per_episode.push(start.elapsed().as_secs_f64());
    }
    if trajs.is_empty() {
        return Err(Error::contract("evaluation needs at least one plannable tick"));
    }
    let flow_calls = match policy {
        Policy::Model(m) => m.world.flow_calls() - calls_before,
        _ => 0,
    };

    let runs: Vec<(&[Point], &Episode, usize)> = trajs
        .iter()
        .map(|(i, t, w)| (w.as_slice(), &data.episodes[*i], *t))
        .collect();
    let cr_at = collision_rate(&runs)?;

    let mut l2 = [0.0; 3];
    let mut subs = [0.0; 5];
    let mut pdms_sum = 0.0;
    let mut rows: Vec<EpisodeRow> = Vec::new();
    for &(w, ep, t) in &runs {
        let h = l2_displacement(w, &ep.expert_trajectory[t])?;
        let s = run_subscores(w, ep, t)?;
        let score = pdms(&s)?;
        for (a, v) in l2.iter_mut().zip(h.to_array()) {
            *a += v;
        }
        for (a, v) in subs.iter_mut().zip([s.nc, s.dac, s.ep, s.ttc, s.comfort]) {
            *a += v;
        }
        pdms_sum += score;

        if rows.last().is_none_or(|r| r.episode != ep.id) {
            rows.push(EpisodeRow {
                episode: ep.id.clone(),
                runs: 0,
                l2_at: Horizons::default(),
                collisions: 0,
                pdms: 0.0,
            });
        }
        let row = rows.last_mut().expect("row exists");
        row.runs += 1;
        row.l2_at = Horizons::from_array({
            let mut cur = row.l2_at.to_array();
            cur.iter_mut().zip(h.to_array()).for_each(|(c, v)| *c += v);
            cur
        });
        row.collisions += usize::from(s.nc == 0.0);
        row.pdms += score;
    }
    for row in &mut rows {
        let n = row.runs as f64;
        row.l2_at = Horizons::from_array(row.l2_at.to_array().map(|v| v / n));
        row.pdms /= n;
    }
    let n = runs.len() as f64;
    let l2_at = Horizons::from_array(l2.map(|v| v / n));
    let subs = subs.map(|v| v / n);
    let report = EvalReport {
        policy: match policy {
            Policy::Model(_) => "model",
            Policy::Expert => "expert",
            Policy::ConstantVelocity => "constant_velocity",
        }
        .into(),
        episodes: data.len(),
        runs: runs.len(),
        metrics: PlanMetrics {
            l2_at,
            l2_avg: l2_at.avg(),
            cr_at,
            cr_avg: cr_at.avg(),
        },
        subscores: PdmsSubscores {
            nc: subs[0],
            dac: subs[1],
            ep: subs[2],
            ttc: subs[3],
            comfort: subs[4],
        },
        pdms: pdms_sum / n,
        flow_calls,
        per_episode: rows,
    };
    Ok((report, timings))
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let m = &self.metrics;
        let mut s = String::new();
        let _ = writeln!(s, "policy {}  episodes {}  runs {}", self.policy, self.episodes, self.runs);
        let _ = writeln!(s, "{:<8}{:>8}{:>8}{:>8}{:>8}", "", "1s", "2s", "3s", "avg");
        let _ = writeln!(
            s,
            "{:<8}{:>8.3}{:>8.3}{:>8.3}{:>8.3}",
            "L2 (m)", m.l2_at.h1, m.l2_at.h2, m.l2_at.h3, m.l2_avg
        );
        let _ = writeln!(
            s,
            "{:<8}{:>8.2}{:>8.2}{:>8.2}{:>8.2}",
            "CR (%)", m.cr_at.h1, m.cr_at.h2, m.cr_at.h3, m.cr_avg
        );
        let p = &self.subscores;
        let _ = writeln!(
            s,
            "NC {:.3}  DAC {:.3}  EP {:.3}  TTC {:.3}  C {:.3}  PDMS {:.3}",
            p.nc, p.dac, p.ep, p.ttc, p.comfort, self.pdms
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("episode,runs,l2_1s,l2_2s,l2_3s,collisions,pdms\n");
        for r in &self.per_episode {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.episode, r.runs, r.l2_at.h1, r.l2_at.h2, r.l2_at.h3, r.collisions, r.pdms
            );
        }
        s
    }
}
