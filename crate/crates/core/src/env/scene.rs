use std::collections::VecDeque;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    observe_with_occluders, Cell, Disc, Observation, RobotPose, SensorConfig,
    TraversabilityGrid, Velocity, DEFAULT_RESOLUTION,
};
use crate::error::{Error, Result};

const MAX_ATTEMPTS: u64 = 16;
/// Length of free space kept behind the robot along its approach.
const APPROACH_BACK: f64 = 10.0;
const MIN_CLEARANCE: f64 = 1.0;
const PERSON_RADIUS: f64 = 0.3;
/// Inflation used when checking that the horizon is reachable.
pub(crate) const PLANNING_MARGIN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKindTag {
    Corridor,
    Junction,
    OpenWithObstacles,
    CulDeSac,
}

impl SceneKindTag {
    pub const ALL: [SceneKindTag; 4] = [
        SceneKindTag::Corridor,
        SceneKindTag::Junction,
        SceneKindTag::OpenWithObstacles,
        SceneKindTag::CulDeSac,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SceneKindTag::Corridor => "corridor",
            SceneKindTag::Junction => "junction",
            SceneKindTag::OpenWithObstacles => "open-with-obstacles",
            SceneKindTag::CulDeSac => "cul-de-sac",
        }
    }
}

impl fmt::Display for SceneKindTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SceneKindTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SceneKindTag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown scene kind {s:?}")))
    }
}

/// Geometry of a scene, in meters, expressed relative to the robot
/// (X forward, Y left).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SceneKind {
    /// Straight band along the heading.
    Corridor { width: f64 },
    /// Four-way crossing `distance` ahead: left, right and straight exits.
    Junction { width: f64, distance: f64 },
    /// Random disc obstacles; `density` is obstacles per 100 m².
    OpenWithObstacles {
        density: f64,
        min_radius: f64,
        max_radius: f64,
    },
    /// Dead end `depth` ahead with a single side exit.
    CulDeSac {
        width: f64,
        depth: f64,
        branch_left: bool,
    },
}

impl SceneKind {
    pub fn tag(&self) -> SceneKindTag {
        match self {
            SceneKind::Corridor { .. } => SceneKindTag::Corridor,
            SceneKind::Junction { .. } => SceneKindTag::Junction,
            SceneKind::OpenWithObstacles { .. } => SceneKindTag::OpenWithObstacles,
            SceneKind::CulDeSac { .. } => SceneKindTag::CulDeSac,
        }
    }

    /// Random parameters for `tag`.
    pub fn sample<R: Rng + ?Sized>(tag: SceneKindTag, rng: &mut R) -> Self {
        match tag {
            SceneKindTag::Corridor => SceneKind::Corridor {
                width: rng.random_range(2.6..5.0),
            },
            SceneKindTag::Junction => SceneKind::Junction {
                width: rng.random_range(2.6..3.8),
                distance: rng.random_range(8.5..11.0),
            },
            SceneKindTag::OpenWithObstacles => SceneKind::OpenWithObstacles {
                density: rng.random_range(0.5..2.5),
                min_radius: 0.3,
                max_radius: rng.random_range(0.8..2.0),
            },
            SceneKindTag::CulDeSac => SceneKind::CulDeSac {
                width: rng.random_range(2.6..4.0),
                depth: rng.random_range(8.5..10.5),
                branch_left: rng.random_bool(0.5),
            },
        }
    }

    /// Whether the structural shape covers robot-frame point `(u, v)`.
    /// Open scenes are covered everywhere.
    fn covers(&self, u: f64, v: f64) -> bool {
        let band = |w: f64| v.abs() <= w / 2.0;
        match *self {
            SceneKind::Corridor { width } => u >= -APPROACH_BACK && band(width),
            SceneKind::Junction { width, distance } => {
                (u >= -APPROACH_BACK && band(width)) || (u - distance).abs() <= width / 2.0
            }
            SceneKind::OpenWithObstacles { .. } => true,
            SceneKind::CulDeSac {
                width,
                depth,
                branch_left,
            } => {
                let approach = u >= -APPROACH_BACK && u <= depth + width / 2.0 && band(width);
                let side = if branch_left { v >= 0.0 } else { v <= 0.0 };
                approach || ((u - depth).abs() <= width / 2.0 && side)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    #[serde(flatten)]
    pub kind: SceneKind,
    /// Side length of the square world in meters.
    pub extent: f64,
    pub resolution: f64,
    /// Required reach from the robot in meters.
    pub horizon: f64,
    /// Moving occluders seen only by the sensor.
    pub people: usize,
}

impl SceneSpec {
    pub fn new(seed: u64, kind: SceneKind) -> Self {
        SceneSpec {
            seed,
            kind,
            extent: 40.0,
            resolution: DEFAULT_RESOLUTION,
            horizon: 15.0,
            people: 0,
        }
    }

    /// Parameters drawn deterministically from `seed`.
    pub fn sample(tag: SceneKindTag, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce0_e5ba_11ad_0001);
        let kind = SceneKind::sample(tag, &mut rng);
        let people = rng.random_range(0..=2);
        SceneSpec {
            people,
            ..SceneSpec::new(seed, kind)
        }
    }

    fn cells(&self) -> usize {
        (self.extent / self.resolution).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::domain(format!("{name} must be positive, got {v}")))
            }
        };
        positive("extent", self.extent)?;
        positive("resolution", self.resolution)?;
        positive("horizon", self.horizon)?;
        if self.cells() < 4 {
            return Err(Error::domain("world is smaller than four cells"));
        }
        let half = self.extent / 2.0;
        let ahead = |name: &str, d: f64, w: f64| {
            if d + w / 2.0 >= half {
                Err(Error::domain(format!("{name} {d} m does not fit inside the world")))
            } else {
                Ok(())
            }
        };
        match self.kind {
            SceneKind::Corridor { width } => {
                positive("width", width)?;
                if width >= self.extent {
                    return Err(Error::domain("corridor wider than the world"));
                }
            }
            SceneKind::Junction { width, distance } => {
                positive("width", width)?;
                positive("distance", distance)?;
                ahead("junction distance", distance, width)?;
            }
            SceneKind::CulDeSac { width, depth, .. } => {
                positive("width", width)?;
                positive("depth", depth)?;
                ahead("dead-end depth", depth, width)?;
            }
            SceneKind::OpenWithObstacles {
                density,
                min_radius,
                max_radius,
            } => {
                if !(density >= 0.0 && density.is_finite()) {
                    return Err(Error::domain(format!("density must be ≥ 0, got {density}")));
                }
                positive("min_radius", min_radius)?;
                positive("max_radius", max_radius)?;
                if max_radius < min_radius {
                    return Err(Error::domain("max_radius below min_radius"));
                }
            }
        }
        Ok(())
    }
}

/// Occluder moving at constant velocity; `position` is its location at t = 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Person {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub radius: f64,
}

impl Person {
    pub fn at(&self, t: f64) -> Disc {
        Disc {
            x: self.position[0] + self.velocity[0] * t,
            y: self.position[1] + self.velocity[1] * t,
            radius: self.radius,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    pub grid: TraversabilityGrid,
    pub pose: RobotPose,
    /// Forward speed during the approach, m/s.
    pub speed: f64,
    pub people: Vec<Person>,
}

impl Scene {
    fn frame_times(n: usize, rate: f64) -> impl Iterator<Item = f64> {
        (0..n).map(move |i| -((n - 1 - i) as f64) / rate)
    }

    /// Poses at the scan frames, oldest first, ending at the current pose.
    pub fn pose_history(&self, sensor: &SensorConfig) -> Vec<RobotPose> {
        Self::frame_times(sensor.frames, sensor.frame_rate)
            .map(|t| {
                let [x, y] = self.pose.to_world([self.speed * t, 0.0]);
                RobotPose::new(x, y, self.pose.heading)
            })
            .collect()
    }

    pub fn velocity_history(&self, sensor: &SensorConfig) -> Vec<Velocity> {
        vec![
            Velocity {
                linear: self.speed,
                angular: 0.0,
            };
            sensor.velocities
        ]
    }

    pub fn occluders(&self, sensor: &SensorConfig) -> Vec<Vec<Disc>> {
        Self::frame_times(sensor.frames, sensor.frame_rate)
            .map(|t| self.people.iter().map(|p| p.at(t)).collect())
            .collect()
    }

    pub fn observe(&self, sensor: &SensorConfig) -> Result<Observation> {
        let occluders = if self.people.is_empty() {
            Vec::new()
        } else {
            self.occluders(sensor)
        };
        observe_with_occluders(
            &self.grid,
            &self.pose_history(sensor),
            &self.velocity_history(sensor),
            sensor,
            &occluders,
        )
    }
}

/// Builds the world for `spec`, retrying with fresh randomness until the robot
/// has clearance and the horizon is reachable.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut last = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(attempt);
        match try_generate(spec, &mut rng) {
            Ok(scene) => return Ok(scene),
            Err(reason) => last = reason,
        }
    }
    Err(Error::Generation(format!(
        "{} seed {}: {last} after {MAX_ATTEMPTS} attempts",
        spec.kind.tag(),
        spec.seed
    )))
}

fn try_generate(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> std::result::Result<Scene, String> {
    let n = spec.cells();
    let res = spec.resolution;
    let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let speed = rng.random_range(0.5..1.5);
    let robot = Cell::new(n / 2, n / 2);
    let mut grid = TraversabilityGrid::new(n, n, res, false).map_err(|e| e.to_string())?;
    let [cx, cy] = grid.center(robot);
    let pose = RobotPose::new(cx, cy, heading);

    for row in 0..n {
        for col in 0..n {
            let c = Cell::new(col, row);
            let [u, v] = pose.to_robot(grid.center(c));
            grid.set(c, spec.kind.covers(u, v));
        }
    }

    if let SceneKind::OpenWithObstacles {
        density,
        min_radius,
        max_radius,
    } = spec.kind
    {
        let count = (density * spec.extent * spec.extent / 100.0).round() as usize;
        let mut discs = Vec::with_capacity(count);
        while discs.len() < count {
            let x = rng.random_range(0.0..spec.extent);
            let y = rng.random_range(0.0..spec.extent);
            let radius = rng.random_range(min_radius..=max_radius);
            let [u, v] = pose.to_robot([x, y]);
            // Distance to the segment the robot just drove along.
            let du = u - u.clamp(-3.0, 0.0);
            if (du * du + v * v).sqrt() < radius + MIN_CLEARANCE + 0.5 {
                continue;
            }
            discs.push(Disc { x, y, radius });
        }
        grid = grid.with_discs(&discs);
    }

    let sdf = grid.signed_distance();
    if !grid.is_traversable(robot) || sdf.at(robot) < MIN_CLEARANCE {
        return Err("robot clearance below 1 m".into());
    }
    let planning = grid.inflate_with(&sdf, PLANNING_MARGIN);
    if reachable_extent(&planning, robot) < spec.horizon {
        return Err(format!("no reachable cell {} m away", spec.horizon));
    }

    let mut people = Vec::with_capacity(spec.people);
    for _ in 0..spec.people {
        for _ in 0..50 {
            let u = rng.random_range(3.0..12.0);
            let v = rng.random_range(-2.0..2.0);
            let position = pose.to_world([u, v]);
            let dir = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let s = rng.random_range(0.4..1.2);
            let person = Person {
                position,
                velocity: [s * dir.cos(), s * dir.sin()],
                radius: PERSON_RADIUS,
            };
            // Must stand in free space and never touch the robot's recent path.
            let clear = (0..=3).all(|i| {
                let t = -(i as f64) / 3.0;
                let d = person.at(t);
                let [rx, ry] = pose.to_world([speed * t, 0.0]);
                ((d.x - rx).powi(2) + (d.y - ry).powi(2)).sqrt() > d.radius + MIN_CLEARANCE
            });
            if clear && grid.point_traversable(position[0], position[1]) {
                people.push(person);
                break;
            }
        }
    }

    Ok(Scene {
        spec: spec.clone(),
        grid,
        pose,
        speed,
        people,
    })
}

/// Largest Euclidean distance (m) from `start` to any cell reachable through
/// 8-connected moves that never cut a blocked corner.
pub fn reachable_extent(grid: &TraversabilityGrid, start: Cell) -> f64 {
    if !grid.is_traversable(start) {
        return 0.0;
    }
    let (w, h) = (grid.width(), grid.height());
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::from([start]);
    seen[grid.index(start)] = true;
    let mut best = 0.0f64;
    let [sx, sy] = grid.center(start);
    while let Some(c) = queue.pop_front() {
        let [x, y] = grid.center(c);
        best = best.max(((x - sx).powi(2) + (y - sy).powi(2)).sqrt());
        for (dc, dr) in NEIGHBOURS {
            let (nc, nr) = (c.col as i64 + dc, c.row as i64 + dr);
            if !grid.traversable_at(nc, nr) {
                continue;
            }
            if dc != 0
                && dr != 0
                && !(grid.traversable_at(c.col as i64 + dc, c.row as i64)
                    && grid.traversable_at(c.col as i64, c.row as i64 + dr))
            {
                continue;
            }
            let i = nr as usize * w + nc as usize;
            if !seen[i] {
                seen[i] = true;
                queue.push_back(Cell::new(nc as usize, nr as usize));
            }
        }
    }
    best
}

pub(crate) const NEIGHBOURS: [(i64, i64); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
];

const SCENE_MAGIC: &str = "mtglab-scene 1";

/// Line-oriented text form: magic line, `width height resolution seed`,
/// `pose x y heading`, then one run-length-encoded line per grid row.
pub fn write_scene<W: Write>(
    mut w: W,
    grid: &TraversabilityGrid,
    pose: &RobotPose,
    seed: u64,
) -> Result<()> {
    writeln!(w, "{SCENE_MAGIC}")?;
    writeln!(
        w,
        "{} {} {} {}",
        grid.width(),
        grid.height(),
        grid.resolution(),
        seed
    )?;
    writeln!(w, "pose {} {} {}", pose.x, pose.y, pose.heading)?;
    for row in grid.rle_rows() {
        writeln!(w, "{row}")?;
    }
    Ok(())
}

pub fn read_scene<R: BufRead>(r: R) -> Result<(TraversabilityGrid, RobotPose, u64)> {
    let lines = r.lines().collect::<std::io::Result<Vec<_>>>()?;
    let bad = |detail: String| Error::format("scene", detail);
    if lines.first().map(String::as_str) != Some(SCENE_MAGIC) {
        return Err(bad("missing header line".into()));
    }
    let header: Vec<&str> = lines
        .get(1)
        .ok_or_else(|| bad("missing size line".into()))?
        .split_whitespace()
        .collect();
    if header.len() != 4 {
        return Err(bad(format!("size line has {} fields", header.len())));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
    let int = |s: &str| s.parse::<u64>().map_err(|_| bad(format!("bad integer {s:?}")));
    let (width, height) = (int(header[0])? as usize, int(header[1])? as usize);
    let resolution = num(header[2])?;
    let seed = int(header[3])?;
    let pose_line: Vec<&str> = lines
        .get(2)
        .ok_or_else(|| bad("missing pose line".into()))?
        .split_whitespace()
        .collect();
    if pose_line.len() != 4 || pose_line[0] != "pose" {
        return Err(bad("malformed pose line".into()));
    }
    let pose = RobotPose::new(num(pose_line[1])?, num(pose_line[2])?, num(pose_line[3])?);
    let grid = TraversabilityGrid::from_rle_rows(width, height, resolution, &lines[3..])?;
    Ok((grid, pose, seed))
}
