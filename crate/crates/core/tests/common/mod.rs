//! Fixtures shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use mtglab_core::env::{observe, Cell, RobotPose, SensorConfig, TraversabilityGrid, Velocity};
use mtglab_core::losses::LossWeights;
use mtglab_core::model::{Mode, Model, ModelConfig};
use mtglab_core::oracle::{successors, GroundTruthSet, Trajectory};
use mtglab_core::tensor::Graph;
use mtglab_core::trainer::{objective, LabeledScene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A 20 m by 10 m field with a wall 0.6 m to the robot's left, so fresh
/// trajectories sit inside the clearance band where the traversability
/// term is active.
pub fn wall_scene(cfg: &ModelConfig) -> LabeledScene {
    field_scene(cfg, 6, 0.02)
}

/// Field with an 0.8 m wall `gap` cells to the robot's left and two
/// ground-truth paths: straight ahead and a rightward parabola `y = −bend·x²`.
pub fn field_scene(cfg: &ModelConfig, gap: usize, bend: f64) -> LabeledScene {
    let mut grid = TraversabilityGrid::new(200, 100, 0.1, true).unwrap();
    for row in 50 + gap..58 + gap {
        for col in 0..200 {
            grid.set(Cell::new(col, row), false);
        }
    }
    let pose = RobotPose::new(2.0, 5.0, 0.0);
    let sensor = SensorConfig {
        beams: cfg.beams,
        frames: cfg.frames,
        velocities: cfg.velocities,
        r_max: cfg.r_max,
        ..SensorConfig::default()
    };
    let poses: Vec<RobotPose> = (0..cfg.frames)
        .map(|i| RobotPose::new(2.0 - 0.3 * (cfg.frames - 1 - i) as f64, 5.0, 0.0))
        .collect();
    let vel: Vec<Velocity> = (0..cfg.velocities)
        .map(|i| Velocity {
            linear: 0.8 + 0.02 * i as f64,
            angular: 0.05 - 0.01 * i as f64,
        })
        .collect();
    let observation = observe(&grid, &poses, &vel, &sensor).unwrap();
    let step = 12.0 / cfg.waypoints as f64;
    let straight = (1..=cfg.waypoints).map(|i| [i as f64 * step, 0.0]).collect();
    let right = (1..=cfg.waypoints)
        .map(|i| {
            let x = i as f64 * step;
            [x, -bend * x * x]
        })
        .collect();
    let gt = GroundTruthSet {
        trajectories: vec![Trajectory::new(straight), Trajectory::new(right)],
        target_angles: vec![0.0, -0.5],
    };
    LabeledScene::new(grid, pose, observation, gt)
}

/// Fixed, non-degenerate latent noise for `n` scenes.
pub fn fixed_noise(cfg: &ModelConfig, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|s| {
            (0..cfg.noise_len())
                .map(|i| ((i * 7 + s * 3) as f64 * 0.61).sin())
                .collect()
        })
        .collect()
}

pub fn loss_value(model: &Model, scenes: &[&LabeledScene], noise: &[Vec<f64>], w: &LossWeights) -> f64 {
    let mut g = Graph::new();
    let v = model.bind(&mut g);
    let obj = objective(&mut g, model, &v, scenes, noise, w).unwrap();
    g.item(obj.total)
}

/// Per-parameter `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` of the
/// total objective, numeric by central differences with step `h`.
pub fn gradient_errors(
    model: &Model,
    scenes: &[&LabeledScene],
    noise: &[Vec<f64>],
    w: &LossWeights,
    h: f64,
) -> Vec<(String, f64)> {
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let v = model.bind(&mut g);
        let obj = objective(&mut g, model, &v, scenes, noise, w).unwrap();
        let mut grads = g.backward(obj.total).unwrap();
        v.iter()
            .zip(model.params())
            .map(|(&x, p)| grads.take(x).unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect()
    };
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (i, name) in model.names().iter().enumerate() {
        let n = model.params()[i].numel();
        let mut numeric = vec![0.0; n];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x = model.params()[i].data()[j];
            probe.params_mut()[i].data_mut()[j] = x + h;
            let up = loss_value(&probe, scenes, noise, w);
            probe.params_mut()[i].data_mut()[j] = x - h;
            let down = loss_value(&probe, scenes, noise, w);
            probe.params_mut()[i].data_mut()[j] = x;
            *slot = (up - down) / (2.0 * h);
        }
        let a = &analytic[i];
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = a.iter().zip(&numeric).map(|(x, y)| x - y).collect();
        let scale = norm(a).max(norm(&numeric));
        let rel = if scale == 0.0 { 0.0 } else { norm(&diff) / scale };
        out.push((name.clone(), rel));
    }
    out
}

struct Item(f64, usize);

impl PartialEq for Item {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Item {}
impl PartialOrd for Item {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Item {
    fn cmp(&self, o: &Self) -> Ordering {
        o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
    }
}

/// Uniform-cost search over the same move set; `None` if unreachable.
pub fn ucs(grid: &TraversabilityGrid, start: Cell, goal: Cell) -> Option<f64> {
    let w = grid.width();
    let mut dist = vec![f64::INFINITY; w * grid.height()];
    let mut heap = BinaryHeap::new();
    dist[start.row * w + start.col] = 0.0;
    heap.push(Item(0.0, start.row * w + start.col));
    while let Some(Item(d, i)) = heap.pop() {
        if d > dist[i] {
            continue;
        }
        if i == goal.row * w + goal.col {
            return Some(d);
        }
        for (nb, step) in successors(grid, Cell::new(i % w, i / w)) {
            let j = nb.row * w + nb.col;
            if d + step < dist[j] {
                dist[j] = d + step;
                heap.push(Item(d + step, j));
            }
        }
    }
    None
}

/// Straight and diagonal move counts of a cheapest path. Costs `a + b√2` with
/// integer counts are equal exactly when the counts are.
pub fn ucs_moves(grid: &TraversabilityGrid, start: Cell, goal: Cell) -> Option<(u32, u32)> {
    let key = |(a, b): (u32, u32)| a as f64 + b as f64 * std::f64::consts::SQRT_2;
    let w = grid.width();
    let mut best: Vec<Option<(u32, u32)>> = vec![None; w * grid.height()];
    let mut heap = BinaryHeap::new();
    best[start.row * w + start.col] = Some((0, 0));
    heap.push(Item(0.0, start.row * w + start.col));
    while let Some(Item(d, i)) = heap.pop() {
        let here = best[i].unwrap();
        if d > key(here) {
            continue;
        }
        if i == goal.row * w + goal.col {
            return Some(here);
        }
        let c = Cell::new(i % w, i / w);
        for (nb, _) in successors(grid, c) {
            let j = nb.row * w + nb.col;
            let next = if nb.row != c.row && nb.col != c.col { (here.0, here.1 + 1) } else { (here.0 + 1, here.1) };
            if best[j].is_none_or(|old| key(next) < key(old)) {
                best[j] = Some(next);
                heap.push(Item(key(next), j));
            }
        }
    }
    None
}

/// Straight and diagonal move counts along an 8-connected path.
pub fn move_counts(cells: &[Cell]) -> (u32, u32) {
    let diagonal = cells.windows(2).filter(|w| w[0].row != w[1].row && w[0].col != w[1].col).count() as u32;
    (cells.len().saturating_sub(1) as u32 - diagonal, diagonal)
}

pub fn random_grid(rng: &mut ChaCha8Rng, n: usize, blocked: f64) -> TraversabilityGrid {
    let cells = (0..n * n).map(|_| !rng.random_bool(blocked)).collect();
    TraversabilityGrid::from_cells(n, n, 0.1, cells).unwrap()
}

pub fn random_free(rng: &mut ChaCha8Rng, g: &TraversabilityGrid) -> Cell {
    loop {
        let c = Cell::new(rng.random_range(0..g.width()), rng.random_range(0..g.height()));
        if g.is_traversable(c) {
            return c;
        }
    }
}

pub fn path_cost(cells: &[Cell]) -> f64 {
    cells
        .windows(2)
        .map(|w| {
            let dc = w[0].col.abs_diff(w[1].col);
            let dr = w[0].row.abs_diff(w[1].row);
            assert!(dc <= 1 && dr <= 1 && dc + dr > 0, "not an 8-connected step");
            if dc + dr == 2 {
                std::f64::consts::SQRT_2
            } else {
                1.0
            }
        })
        .sum()
}

/// Exhaustive double loop straight from the definition.
pub fn brute_hausdorff(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let mut ab = 0.0;
    for p in a {
        let mut best = f64::INFINITY;
        for q in b {
            let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
            if d < best {
                best = d;
            }
        }
        ab += best;
    }
    let mut ba = 0.0;
    for q in b {
        let mut best = f64::INFINITY;
        for p in a {
            let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
            if d < best {
                best = d;
            }
        }
        ba += best;
    }
    0.5 * (ab / a.len() as f64 + ba / b.len() as f64)
}

/// Objective averaged over the same eight latent draws, so before and
/// after are compared on equal noise.
pub fn expected_loss(model: &Model, scene: &LabeledScene, w: &LossWeights) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let noise: Vec<Vec<f64>> = (0..8).map(|_| model.noise(Mode::Sample, &mut rng)).collect();
    let scenes = vec![scene; 8];
    loss_value(model, &scenes, &noise, w)
}
