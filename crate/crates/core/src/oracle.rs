//! A* ground-truth fans: arc targets, grid search and waypoint resampling.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::env::{Cell, RobotPose, TraversabilityGrid};
use crate::error::{Error, Result};
use crate::losses::avg_hausdorff;
use crate::metrics::incursion_fraction;

/// Waypoints in meters, robot frame (X forward, Y left).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn new(waypoints: Vec<[f64; 2]>) -> Self {
        Trajectory { waypoints }
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    /// Polyline length through the waypoints.
    pub fn arclength(&self) -> f64 {
        self.waypoints
            .windows(2)
            .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
            .sum()
    }

    pub fn max_spacing(&self) -> f64 {
        self.waypoints
            .windows(2)
            .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSet {
    pub trajectories: Vec<Trajectory>,
    /// Robot-frame bearing of each trajectory's target, radians.
    pub target_angles: Vec<f64>,
}

impl GroundTruthSet {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FanConfig {
    /// Target arc radius in meters.
    pub horizon: f64,
    pub fov: f64,
    pub max_targets: usize,
    pub waypoints: usize,
    /// Obstacle inflation applied to the planning grid, meters.
    pub margin: f64,
    /// Blocked targets move to the nearest free cell within this radius.
    pub snap_radius: f64,
    /// Paths closer than this (average Hausdorff) to a kept path are dropped.
    pub dedup_distance: f64,
}

impl Default for FanConfig {
    fn default() -> Self {
        FanConfig {
            horizon: 15.0,
            fov: 120f64.to_radians(),
            max_targets: 11,
            waypoints: 16,
            margin: 0.5,
            snap_radius: 1.0,
            dedup_distance: 1.0,
        }
    }
}

impl FanConfig {
    fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || self.max_targets == 0 || self.waypoints == 0 {
            return Err(Error::domain(
                "horizon must be positive and target/waypoint counts at least 1",
            ));
        }
        if !(self.fov > 0.0 && self.fov <= 2.0 * std::f64::consts::PI) {
            return Err(Error::domain(format!("fov must lie in (0, 2π], got {}", self.fov)));
        }
        Ok(())
    }

    /// Bearings of the arc candidates, right to left.
    pub fn target_angles(&self) -> Vec<f64> {
        if self.max_targets == 1 {
            return vec![0.0];
        }
        let step = self.fov / (self.max_targets - 1) as f64;
        (0..self.max_targets)
            .map(|i| -self.fov / 2.0 + i as f64 * step)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPath {
    pub cells: Vec<Cell>,
    /// In cell units: 1 per straight step, √2 per diagonal.
    pub cost: f64,
}

const NEIGHBOURS: [(i64, i64, f64); 8] = [
    (1, 0, 1.0),
    (-1, 0, 1.0),
    (0, 1, 1.0),
    (0, -1, 1.0),
    (1, 1, std::f64::consts::SQRT_2),
    (1, -1, std::f64::consts::SQRT_2),
    (-1, 1, std::f64::consts::SQRT_2),
    (-1, -1, std::f64::consts::SQRT_2),
];

/// Neighbours of `c` reachable in one move. Diagonal moves need both
/// adjacent orthogonal cells free, so paths never clip a blocked corner.
pub fn successors(grid: &TraversabilityGrid, c: Cell) -> impl Iterator<Item = (Cell, f64)> + '_ {
    let (col, row) = (c.col as i64, c.row as i64);
    NEIGHBOURS.iter().filter_map(move |&(dc, dr, cost)| {
        let (nc, nr) = (col + dc, row + dr);
        if !grid.traversable_at(nc, nr) {
            return None;
        }
        if dc != 0 && dr != 0 && !(grid.traversable_at(col + dc, row) && grid.traversable_at(col, row + dr)) {
            return None;
        }
        Some((Cell::new(nc as usize, nr as usize), cost))
    })
}

#[derive(PartialEq)]
struct Open {
    f: f64,
    g: f64,
    index: usize,
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed so BinaryHeap pops the smallest key.
        other
            .f
            .total_cmp(&self.f)
            .then(other.g.total_cmp(&self.g))
            .then(other.index.cmp(&self.index))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Costs closer than this are equal; distinct sums of unit and diagonal
/// steps on grids of this size differ by far more.
const COST_EPS: f64 = 1e-9;

/// Minimum-cost 8-connected path with a Euclidean heuristic.
///
/// Among equal-cost paths the one with the least summed distance from the
/// start-goal line wins, so open ground yields the straightest staircase.
pub fn astar(grid: &TraversabilityGrid, start: Cell, goal: Cell) -> Result<GridPath> {
    for (name, c) in [("start", start), ("goal", goal)] {
        if !grid.is_traversable(c) {
            return Err(Error::domain(format!("{name} cell {c:?} is not traversable")));
        }
    }
    let w = grid.width();
    let n = w * grid.height();
    let (gc, gr) = (goal.col as f64, goal.row as f64);
    let (sc, sr) = (start.col as f64, start.row as f64);
    let (lx, ly) = (gc - sc, gr - sr);
    let line = lx.hypot(ly).max(1e-12);
    let heuristic = |c: Cell| (gc - c.col as f64).hypot(gr - c.row as f64);
    let skew = |c: Cell| ((c.col as f64 - sc) * ly - (c.row as f64 - sr) * lx).abs() / line;

    let mut g = vec![f64::INFINITY; n];
    let mut dev = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    let si = grid.index(start);
    let gi = grid.index(goal);
    g[si] = 0.0;
    dev[si] = 0.0;
    open.push(Open {
        f: heuristic(start),
        g: 0.0,
        index: si,
    });
    while let Some(Open { f, g: popped_g, index }) = open.pop() {
        if closed[index] || popped_g > g[index] + COST_EPS {
            continue;
        }
        if closed[gi] && f > g[gi] + COST_EPS {
            break;
        }
        closed[index] = true;
        if index == gi {
            continue;
        }
        let c = Cell::new(index % w, index / w);
        for (nb, step) in successors(grid, c) {
            let ni = grid.index(nb);
            let cand = g[index] + step;
            let cand_dev = dev[index] + skew(nb);
            let better = cand < g[ni] - COST_EPS || (cand <= g[ni] + COST_EPS && cand_dev < dev[ni] - 1e-12);
            if better {
                g[ni] = cand.min(g[ni]);
                dev[ni] = cand_dev;
                parent[ni] = index;
                closed[ni] = false;
                open.push(Open {
                    f: g[ni] + heuristic(nb),
                    g: g[ni],
                    index: ni,
                });
            }
        }
    }
    if !closed[gi] {
        return Err(Error::NoPath {
            start: (start.col, start.row),
            goal: (goal.col, goal.row),
        });
    }
    let mut cells = vec![goal];
    let mut i = gi;
    while i != si {
        i = parent[i];
        cells.push(Cell::new(i % w, i / w));
    }
    cells.reverse();
    Ok(GridPath { cells, cost: g[gi] })
}

/// Arclength-uniform resampling of the cell-centre polyline to `count`
/// waypoints in the robot frame, first and last waypoints on the path ends.
pub fn resample(path: &[Cell], grid: &TraversabilityGrid, pose: &RobotPose, count: usize) -> Trajectory {
    let pts: Vec<[f64; 2]> = path.iter().map(|&c| pose.to_robot(grid.center(c))).collect();
    resample_polyline(&pts, count)
}

pub fn resample_polyline(pts: &[[f64; 2]], count: usize) -> Trajectory {
    assert!(!pts.is_empty(), "cannot resample an empty polyline");
    let mut cum = Vec::with_capacity(pts.len());
    cum.push(0.0);
    for w in pts.windows(2) {
        let d = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
        cum.push(cum.last().unwrap() + d);
    }
    let total = *cum.last().unwrap();
    if total == 0.0 || count == 1 {
        return Trajectory::new(vec![pts[0]; count]);
    }
    let mut seg = 0;
    let waypoints = (0..count)
        .map(|i| {
            let s = total * i as f64 / (count - 1) as f64;
            while seg + 2 < cum.len() && cum[seg + 1] < s {
                seg += 1;
            }
            let len = cum[seg + 1] - cum[seg];
            let t = if len > 0.0 {
                ((s - cum[seg]) / len).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (a, b) = (pts[seg], pts[seg + 1]);
            [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
        })
        .collect();
    Trajectory::new(waypoints)
}

/// A planned candidate that survived snapping, search and deduplication.
#[derive(Clone, Debug)]
pub struct Target {
    pub cell: Cell,
    pub angle: f64,
    pub path: GridPath,
    pub trajectory: Trajectory,
}

fn snap(grid: &TraversabilityGrid, point: [f64; 2], radius: f64) -> Option<Cell> {
    let res = grid.resolution();
    let reach = (radius / res).ceil() as i64 + 1;
    let col0 = (point[0] / res).floor() as i64;
    let row0 = (point[1] / res).floor() as i64;
    let mut best: Option<(f64, Cell)> = None;
    for row in row0 - reach..=row0 + reach {
        for col in col0 - reach..=col0 + reach {
            if !grid.traversable_at(col, row) {
                continue;
            }
            let c = Cell::new(col as usize, row as usize);
            let [x, y] = grid.center(c);
            let d = (x - point[0]).hypot(y - point[1]);
            if d <= radius && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, c));
            }
        }
    }
    best.map(|(_, c)| c)
}

/// Grid used for planning: obstacles inflated by the configured margin,
/// unless that would swallow the robot.
fn planning_grid(grid: &TraversabilityGrid, start: Cell, margin: f64) -> TraversabilityGrid {
    if margin > 0.0 {
        let inflated = grid.inflate(margin);
        if inflated.is_traversable(start) {
            return inflated;
        }
    }
    grid.clone()
}

/// Arc targets at `cfg.horizon` whose A* paths are viable and mutually
/// distinct, in right-to-left order.
pub fn sample_targets(grid: &TraversabilityGrid, pose: &RobotPose, cfg: &FanConfig) -> Result<Vec<Target>> {
    cfg.validate()?;
    let Some(start) = grid.cell_at(pose.x, pose.y) else {
        return Err(Error::domain("pose lies outside the grid"));
    };
    if !grid.is_traversable(start) {
        return Ok(Vec::new());
    }
    let plan = planning_grid(grid, start, cfg.margin);
    let max_length = 2.0 * cfg.horizon * (cfg.waypoints.saturating_sub(1)) as f64 / cfg.waypoints as f64;
    let mut kept: Vec<Target> = Vec::new();
    for angle in cfg.target_angles() {
        let point = pose.to_world([cfg.horizon * angle.cos(), cfg.horizon * angle.sin()]);
        let Some(cell) = grid.cell_at(point[0], point[1]) else {
            continue;
        };
        let cell = if plan.is_traversable(cell) {
            cell
        } else {
            match snap(&plan, point, cfg.snap_radius) {
                Some(c) => c,
                None => continue,
            }
        };
        let path = match astar(&plan, start, cell) {
            Ok(p) => p,
            Err(Error::NoPath { .. }) => continue,
            Err(e) => return Err(e),
        };
        let trajectory = resample(&path.cells, grid, pose, cfg.waypoints);
        if cfg.waypoints > 1 && trajectory.arclength() > max_length {
            continue;
        }
        if incursion_fraction(&trajectory.waypoints, grid, pose) != 0.0 {
            continue;
        }
        let distinct = kept.iter().all(|k| {
            avg_hausdorff(&k.trajectory.waypoints, &trajectory.waypoints)
                .is_ok_and(|d| d >= cfg.dedup_distance)
        });
        if distinct {
            kept.push(Target {
                cell,
                angle,
                path,
                trajectory,
            });
        }
    }
    Ok(kept)
}

/// The ground-truth fan for one scene; empty when no target is viable.
pub fn build_ground_truth(grid: &TraversabilityGrid, pose: &RobotPose, cfg: &FanConfig) -> Result<GroundTruthSet> {
    let targets = sample_targets(grid, pose, cfg)?;
    Ok(GroundTruthSet {
        target_angles: targets.iter().map(|t| t.angle).collect(),
        trajectories: targets.into_iter().map(|t| t.trajectory).collect(),
    })
}
