//! Procedural traversability worlds, robot state and a planar range sensor.

mod grid;
mod scene;

pub use grid::{
    euclidean_distance_transform, Cell, Disc, DistanceField, TraversabilityGrid,
    DEFAULT_RESOLUTION,
};
pub use scene::{
    generate_scene, read_scene, reachable_extent, write_scene, Person, Scene, SceneKind,
    SceneKindTag, SceneSpec,
};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl RobotPose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        RobotPose {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    /// Robot-frame point (X forward, Y left) to world coordinates.
    pub fn to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    pub fn to_robot(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }
}

/// Linear (m/s) and angular (rad/s) velocity sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Velocity {
    pub linear: f64,
    pub angular: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    /// Field of view in radians, centred on the heading.
    pub fov: f64,
    pub beams: usize,
    pub r_max: f64,
    /// Number of scan frames in an observation.
    pub frames: usize,
    /// Number of velocity samples in an observation.
    pub velocities: usize,
    pub frame_rate: f64,
    pub velocity_rate: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            fov: 120f64.to_radians(),
            beams: 64,
            r_max: 20.0,
            frames: 3,
            velocities: 10,
            frame_rate: 3.0,
            velocity_rate: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Oldest frame first; each frame holds one range per beam.
    pub scans: Vec<Vec<f64>>,
    /// Oldest sample first.
    pub velocities: Vec<Velocity>,
}

impl Observation {
    /// Ranges divided by `r_max` followed by raw velocity pairs, in one flat vector.
    pub fn features(&self, r_max: f64) -> (Vec<f64>, Vec<f64>) {
        let scans = self.scans.iter().flatten().map(|r| r / r_max).collect();
        let vel = self
            .velocities
            .iter()
            .flat_map(|v| [v.linear, v.angular])
            .collect();
        (scans, vel)
    }
}

/// Beam ranges over `fov`, beam `k` at angle `heading − fov/2 + k·fov/(beams−1)`.
/// Rays step cell by cell and stop at the entry of the first non-traversable
/// cell; rays that leave the grid or exceed `r_max` report `r_max`.
pub fn raycast(
    grid: &TraversabilityGrid,
    pose: &RobotPose,
    fov: f64,
    beams: usize,
    r_max: f64,
) -> Result<Vec<f64>> {
    if beams < 2 {
        return Err(Error::domain(format!("need at least 2 beams, got {beams}")));
    }
    if !(fov > 0.0 && fov <= 2.0 * PI) {
        return Err(Error::domain(format!("fov must lie in (0, 2π], got {fov}")));
    }
    if !(r_max > 0.0 && r_max.is_finite()) {
        return Err(Error::domain(format!("r_max must be positive, got {r_max}")));
    }
    if grid.cell_at(pose.x, pose.y).is_none() {
        return Err(Error::domain(format!(
            "pose ({}, {}) lies outside the grid",
            pose.x, pose.y
        )));
    }
    let step = fov / (beams - 1) as f64;
    Ok((0..beams)
        .map(|k| cast_ray(grid, pose.x, pose.y, pose.heading - fov / 2.0 + k as f64 * step, r_max))
        .collect())
}

/// Range reported when the sensor origin itself is inside an obstacle.
const BLOCKED_ORIGIN_RANGE: f64 = 1e-3;

fn cast_ray(grid: &TraversabilityGrid, x0: f64, y0: f64, angle: f64, r_max: f64) -> f64 {
    let res = grid.resolution();
    let (dy, dx) = angle.sin_cos();
    let mut col = (x0 / res).floor() as i64;
    let mut row = (y0 / res).floor() as i64;
    if !grid.traversable_at(col, row) {
        return BLOCKED_ORIGIN_RANGE;
    }
    let axis = |pos: f64, d: f64, cell: i64| -> (i64, f64, f64) {
        if d > 0.0 {
            (1, ((cell + 1) as f64 * res - pos) / d, res / d)
        } else if d < 0.0 {
            (-1, (cell as f64 * res - pos) / d, -res / d)
        } else {
            (0, f64::INFINITY, f64::INFINITY)
        }
    };
    let (step_c, mut t_c, dt_c) = axis(x0, dx, col);
    let (step_r, mut t_r, dt_r) = axis(y0, dy, row);
    loop {
        let t = if t_c < t_r {
            col += step_c;
            let t = t_c;
            t_c += dt_c;
            t
        } else {
            row += step_r;
            let t = t_r;
            t_r += dt_r;
            t
        };
        if t >= r_max || !grid.in_bounds(col, row) {
            return r_max;
        }
        if !grid.traversable_at(col, row) {
            return t.max(BLOCKED_ORIGIN_RANGE);
        }
    }
}

/// Raycasts from the last `sensor.frames` poses (oldest first) and keeps the
/// last `sensor.velocities` velocity samples.
pub fn observe(
    grid: &TraversabilityGrid,
    poses: &[RobotPose],
    velocities: &[Velocity],
    sensor: &SensorConfig,
) -> Result<Observation> {
    observe_with_occluders(grid, poses, velocities, sensor, &[])
}

/// As [`observe`], with per-frame occluder discs (one list per pose, or empty
/// for none) rasterised into the grid before casting.
pub fn observe_with_occluders(
    grid: &TraversabilityGrid,
    poses: &[RobotPose],
    velocities: &[Velocity],
    sensor: &SensorConfig,
    occluders: &[Vec<Disc>],
) -> Result<Observation> {
    if poses.len() < sensor.frames {
        return Err(Error::usage(format!(
            "observation needs {} poses, got {}",
            sensor.frames,
            poses.len()
        )));
    }
    if velocities.len() < sensor.velocities {
        return Err(Error::usage(format!(
            "observation needs {} velocity samples, got {}",
            sensor.velocities,
            velocities.len()
        )));
    }
    if !occluders.is_empty() && occluders.len() != poses.len() {
        return Err(Error::usage(format!(
            "{} occluder frames for {} poses",
            occluders.len(),
            poses.len()
        )));
    }
    let first = poses.len() - sensor.frames;
    let scans = (first..poses.len())
        .map(|i| match occluders.get(i) {
            Some(discs) if !discs.is_empty() => raycast(
                &grid.with_discs(discs),
                &poses[i],
                sensor.fov,
                sensor.beams,
                sensor.r_max,
            ),
            _ => raycast(grid, &poses[i], sensor.fov, sensor.beams, sensor.r_max),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Observation {
        scans,
        velocities: velocities[velocities.len() - sensor.velocities..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angles_wrap_into_half_open_interval() {
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!(normalize_angle(0.0).abs() < 1e-12);
    }

    #[test]
    fn frame_round_trip() {
        let pose = RobotPose::new(3.0, -2.0, 0.7);
        let p = [1.5, -0.25];
        let back = pose.to_robot(pose.to_world(p));
        assert!((back[0] - p[0]).abs() < 1e-12 && (back[1] - p[1]).abs() < 1e-12);
        let ahead = RobotPose::new(0.0, 0.0, PI / 2.0).to_world([1.0, 0.0]);
        assert!(ahead[0].abs() < 1e-12 && (ahead[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn raycast_rejects_bad_arguments() {
        let g = TraversabilityGrid::new(10, 10, 0.1, true).unwrap();
        let p = RobotPose::new(0.5, 0.5, 0.0);
        assert!(raycast(&g, &p, 1.0, 1, 5.0).is_err());
        assert!(raycast(&g, &p, 0.0, 8, 5.0).is_err());
        assert!(raycast(&g, &p, 7.0, 8, 5.0).is_err());
        assert!(raycast(&g, &RobotPose::new(-1.0, 0.5, 0.0), 1.0, 8, 5.0).is_err());
    }

    #[test]
    fn observe_checks_history_length() {
        let g = TraversabilityGrid::new(10, 10, 0.1, true).unwrap();
        let sensor = SensorConfig::default();
        let poses = vec![RobotPose::new(0.5, 0.5, 0.0); 2];
        let vel = vec![Velocity { linear: 0.0, angular: 0.0 }; 10];
        assert!(matches!(observe(&g, &poses, &vel, &sensor), Err(Error::Usage(_))));
    }
}
