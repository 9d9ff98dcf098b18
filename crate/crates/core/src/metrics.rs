//! Non-traversable, coverage and diversity rates.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{RobotPose, TraversabilityGrid};
use crate::error::{Error, Result};
use crate::losses::avg_hausdorff;
use crate::model::{GeneratedSet, Mode, Model};
use crate::oracle::{GroundTruthSet, Trajectory};
use crate::trainer::LabeledScene;

/// Fraction of the polyline's arclength lying on non-traversable cells
/// (or off the grid). Segments are sampled at half-cell spacing. A
/// zero-length polyline counts as 0.
pub fn incursion_fraction(waypoints: &[[f64; 2]], grid: &TraversabilityGrid, pose: &RobotPose) -> f64 {
    let step = grid.resolution() / 2.0;
    let mut total = 0.0;
    let mut blocked = 0.0;
    for w in waypoints.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        if len == 0.0 {
            continue;
        }
        let n = (len / step).ceil().max(1.0) as usize;
        let hits = (0..n)
            .filter(|&i| {
                let t = (i as f64 + 0.5) / n as f64;
                let p = pose.to_world([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
                !grid.point_traversable(p[0], p[1])
            })
            .count();
        if hits == n {
            blocked += len;
        } else if hits > 0 {
            blocked += len * hits as f64 / n as f64;
        }
        total += len;
    }
    if total == 0.0 {
        0.0
    } else {
        blocked / total
    }
}

/// Mean incursion fraction over the generated trajectories.
pub fn non_traversable_rate(generated: &[Trajectory], grid: &TraversabilityGrid, pose: &RobotPose) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::usage("non-traversable rate needs at least one trajectory"));
    }
    let sum: f64 = generated
        .iter()
        .map(|t| incursion_fraction(&t.waypoints, grid, pose))
        .sum();
    Ok(sum / generated.len() as f64)
}

/// Mean over ground-truth paths of `exp(−d)`, `d` the average Hausdorff
/// distance to the nearest generated trajectory.
pub fn coverage_rate(generated: &[Trajectory], gt: &GroundTruthSet) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::usage("coverage rate needs at least one generated trajectory"));
    }
    if gt.is_empty() {
        return Err(Error::usage("coverage rate needs at least one ground-truth trajectory"));
    }
    let mut sum = 0.0;
    for g in &gt.trajectories {
        let mut best = f64::INFINITY;
        for t in generated {
            best = best.min(avg_hausdorff(&g.waypoints, &t.waypoints)?);
        }
        sum += (-best).exp();
    }
    Ok(sum / gt.len() as f64)
}

/// Sum of pairwise average Hausdorff distances over ordered pairs `i ≠ j`,
/// divided by N². `None` for fewer than two trajectories.
pub fn diversity_rate(generated: &[Trajectory]) -> Result<Option<f64>> {
    let n = generated.len();
    if n < 2 {
        return Ok(None);
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += avg_hausdorff(&generated[i].waypoints, &generated[j].waypoints)?;
            }
        }
    }
    Ok(Some(sum / (n * n) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r_n: f64,
    pub r_c: f64,
    pub r_d: Option<f64>,
    pub t_ms: f64,
    pub n_scenes: usize,
}

/// What produces trajectories during evaluation.
pub enum Generator<'m> {
    Model { model: &'m Model, mode: Mode },
    /// Replays each scene's own ground truth.
    Oracle,
}

impl Generator<'_> {
    /// Scene `index` draws its latent noise from a stream keyed by `seed`
    /// and `index`, so reports do not depend on evaluation order.
    pub fn generate(&self, scene: &LabeledScene, seed: u64, index: usize) -> Result<Vec<Trajectory>> {
        match self {
            Generator::Oracle => Ok(scene.ground_truth.trajectories.clone()),
            Generator::Model { model, mode } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(index as u64);
                let GeneratedSet { trajectories, .. } = model.forward(&scene.observation, *mode, &mut rng)?;
                Ok(trajectories)
            }
        }
    }
}

/// Per-scene rates averaged over `scenes`. `t_ms` times the generator call
/// only; scenes are processed one at a time so timings do not contend.
pub fn evaluate(generator: &Generator<'_>, scenes: &[LabeledScene], seed: u64) -> Result<MetricsReport> {
    if scenes.is_empty() {
        return Err(Error::usage("evaluation needs at least one scene"));
    }
    let (mut r_n, mut r_c, mut r_d, mut n_d, mut elapsed) = (0.0, 0.0, 0.0, 0usize, 0.0);
    for (i, s) in scenes.iter().enumerate() {
        if s.ground_truth.is_empty() {
            return Err(Error::usage(format!("scene {i} has no ground truth")));
        }
        let start = Instant::now();
        let generated = generator.generate(s, seed, i)?;
        elapsed += start.elapsed().as_secs_f64();
        r_n += non_traversable_rate(&generated, &s.grid, &s.pose)?;
        r_c += coverage_rate(&generated, &s.ground_truth)?;
        if let Some(d) = diversity_rate(&generated)? {
            r_d += d;
            n_d += 1;
        }
    }
    let n = scenes.len() as f64;
    Ok(MetricsReport {
        r_n: r_n / n,
        r_c: r_c / n,
        r_d: (n_d > 0).then(|| r_d / n_d as f64),
        t_ms: 1e3 * elapsed / n,
        n_scenes: scenes.len(),
    })
}
