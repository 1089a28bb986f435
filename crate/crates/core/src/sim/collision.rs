use super::{EgoState, Episode, Point, EGO_RADIUS, HORIZON};
use crate::error::{Error, Result};

/// Strict disc overlap: touching discs do not collide.
pub fn discs_overlap(a: Point, ra: f64, b: Point, rb: f64) -> bool {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    (dx * dx + dy * dy).sqrt() < ra + rb
}

/// Maps an ego-frame point (x forward, y left) into the world frame.
pub fn ego_to_world(pose: &EgoState, p: Point) -> Point {
    let (s, c) = pose.heading.sin_cos();
    [pose.x + c * p[0] - s * p[1], pose.y + s * p[0] + c * p[1]]
}

/// First horizon index (0-based, waypoint `i` is matched against tick
/// `t + i + 1`) at which the ego disc overlaps an obstacle disc.
pub fn check_collision(traj: &[Point], episode: &Episode, t: usize) -> Result<Option<usize>> {
    if traj.len() != HORIZON {
        return Err(Error::Shape {
            op: "check_collision",
            lhs: vec![traj.len(), 2],
            rhs: vec![HORIZON, 2],
        });
    }
    if t + HORIZON >= episode.ticks {
        return Err(Error::Bounds {
            what: "collision horizon",
            index: t + HORIZON,
            len: episode.ticks,
        });
    }
    let pose = &episode.ego[t];
    for (i, &wp) in traj.iter().enumerate() {
        let world = ego_to_world(pose, wp);
        let tick = t + i + 1;
        let hit = episode
            .obstacles
            .iter()
            .any(|o| discs_overlap(world, EGO_RADIUS, o.trajectory[tick], o.radius));
        if hit {
            return Ok(Some(i));
        }
    }
    Ok(None)
}
