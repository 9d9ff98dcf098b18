//! Training objective: KL, coverage reconstruction, diversity and
//! traversability terms, plus the weighted total.

use serde::{Deserialize, Serialize};

use crate::env::{DistanceField, RobotPose};
use crate::error::{Error, Result};
use crate::oracle::{GroundTruthSet, Trajectory};
use crate::tensor::{Graph, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// KL weight.
    pub beta1: f64,
    /// Reconstruction and diversity weight.
    pub beta2: f64,
    /// Traversability weight.
    pub beta3: f64,
    /// Weight of the final-position error inside the reconstruction term.
    pub endpoint: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta1: 0.1,
            beta2: 1.0,
            beta3: 10.0,
            endpoint: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("beta3", self.beta3),
            ("endpoint", self.endpoint),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::domain(format!("{name} must be a finite value ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// How the generated set is fitted to the ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reconstruction {
    /// Each ground-truth path pulls only its nearest generated trajectory.
    Coverage,
    /// Every generated trajectory is pulled toward every ground-truth path,
    /// averaged over the generated set.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Diversity {
    /// Effective trajectories repel each other; redundant ones are pulled to
    /// their nearest effective trajectory.
    EffectiveRedundant,
    /// All generated pairs repel each other.
    AllPairs,
    None,
}

/// Which terms a model variant trains with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub reconstruction: Reconstruction,
    pub diversity: Diversity,
    pub traversability: bool,
}

/// Unweighted term values; `total` is their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub kl: f64,
    pub coverage: f64,
    pub diversity: f64,
    pub traversability: f64,
}

impl LossBreakdown {
    pub fn weighted(kl: f64, coverage: f64, diversity: f64, traversability: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            total: w.beta1 * kl + w.beta2 * (coverage + diversity) + w.beta3 * traversability,
            kl,
            coverage,
            diversity,
            traversability,
        }
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("kl", self.kl),
            ("coverage", self.coverage),
            ("diversity", self.diversity),
            ("traversability", self.traversability),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn directed_mean(from: &[[f64; 2]], to: &[[f64; 2]]) -> f64 {
    let sum: f64 = from
        .iter()
        .map(|&p| to.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min))
        .sum();
    sum / from.len() as f64
}

/// Symmetric mean of nearest-neighbour distances between two waypoint sets.
pub fn avg_hausdorff(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::usage("average Hausdorff distance of an empty trajectory"));
    }
    Ok(0.5 * (directed_mean(b, a) + directed_mean(a, b)))
}

/// Taped form of [`avg_hausdorff`] for `[n, 2]` and `[m, 2]` waypoint tensors.
pub fn avg_hausdorff_var(g: &mut Graph<'_>, a: Var, b: Var) -> Result<Var> {
    let d = g.pairwise_dist(a, b)?;
    let to_b = g.min_axis(d, 1)?;
    let to_a = g.min_axis(d, 0)?;
    let ma = g.mean(to_b);
    let mb = g.mean(to_a);
    let s = g.add(ma, mb)?;
    Ok(g.scale(s, 0.5))
}

/// Mean index-aligned Euclidean distance between two equal-length trajectories.
pub fn aligned_distance(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(&p, &q)| dist(p, q)).sum();
    sum / a.len().max(1) as f64
}

fn aligned_distance_var(g: &mut Graph<'_>, a: Var, b: Var) -> Result<Var> {
    let d = g.row_dist(a, b)?;
    Ok(g.mean(d))
}

/// Nearest generated trajectory for each ground-truth path; generated
/// trajectories that serve no path are redundant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// `effective[k]` is the generated index nearest to ground-truth path `k`.
    pub effective: Vec<usize>,
    /// Unassigned generated indices, ascending.
    pub redundant: Vec<usize>,
}

impl Assignment {
    /// Distinct effective indices, ascending.
    pub fn effective_set(&self) -> Vec<usize> {
        let mut s = self.effective.clone();
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// Row-wise argmin over a `G × K` table of distances (lowest index wins ties).
pub fn assign_from_table(table: &[Vec<f64>], generated: usize) -> Assignment {
    let effective: Vec<usize> = table
        .iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let redundant = (0..generated).filter(|j| !effective.contains(j)).collect();
    Assignment {
        effective,
        redundant,
    }
}

pub fn assign(generated: &[Trajectory], gt: &GroundTruthSet) -> Result<Assignment> {
    if generated.is_empty() || gt.is_empty() {
        return Err(Error::usage("assignment needs generated and ground-truth trajectories"));
    }
    let table = gt
        .trajectories
        .iter()
        .map(|t| {
            generated
                .iter()
                .map(|g| avg_hausdorff(&g.waypoints, &t.waypoints))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assign_from_table(&table, generated.len()))
}

/// KL divergence of `N(μ, σ²)` from the standard normal.
pub fn kl_term(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::Dimension {
            op: "kl_term",
            lhs: vec![mu.len()],
            rhs: vec![sigma.len()],
        });
    }
    if let Some(s) = sigma.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::domain(format!("sigma must be positive, got {s}")));
    }
    Ok(0.5
        * mu.iter()
            .zip(sigma)
            .map(|(&m, &s)| s * s + m * m - 1.0 - (s * s).ln())
            .sum::<f64>())
}

/// Taped KL from mean and log-variance tensors of equal shape.
pub fn kl_var(g: &mut Graph<'_>, mu: Var, logvar: Var) -> Result<Var> {
    let var = g.exp(logvar);
    let mu2 = g.mul(mu, mu)?;
    let a = g.add(var, mu2)?;
    let b = g.sub(a, logvar)?;
    let s = g.sum(b);
    let n = g.value(mu).len() as f64;
    let s = g.offset(s, -n);
    Ok(g.scale(s, 0.5))
}

fn endpoint_var(g: &mut Graph<'_>, a: Var, b: Var) -> Result<Var> {
    let (na, nb) = (g.shape(a)[0], g.shape(b)[0]);
    let ea = g.slice(a, 0, na - 1, na)?;
    let eb = g.slice(b, 0, nb - 1, nb)?;
    let d = g.row_dist(ea, eb)?;
    Ok(g.sum(d))
}

/// Distance table `G × K` from current trajectory values.
fn table(g: &Graph<'_>, traj: &[Var], gt: &[Var]) -> Result<Vec<Vec<f64>>> {
    let pts = |v: Var| -> Vec<[f64; 2]> { g.value(v).chunks(2).map(|c| [c[0], c[1]]).collect() };
    let gen: Vec<_> = traj.iter().map(|&v| pts(v)).collect();
    gt.iter()
        .map(|&t| {
            let t = pts(t);
            gen.iter().map(|p| avg_hausdorff(p, &t)).collect()
        })
        .collect()
}

/// Sum over ground-truth paths of the distance (plus weighted endpoint error)
/// to their assigned trajectory.
pub fn coverage_var(
    g: &mut Graph<'_>,
    traj: &[Var],
    gt: &[Var],
    assignment: &Assignment,
    endpoint: f64,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(gt.len());
    for (k, &t) in gt.iter().enumerate() {
        let e = traj[assignment.effective[k]];
        terms.push(fit_var(g, e, t, endpoint)?);
    }
    Ok(g.add_all(&terms)?.unwrap_or_else(|| g.scalar(0.0)))
}

fn fit_var(g: &mut Graph<'_>, a: Var, b: Var, endpoint: f64) -> Result<Var> {
    let d = avg_hausdorff_var(g, a, b)?;
    if endpoint == 0.0 {
        return Ok(d);
    }
    let e = endpoint_var(g, a, b)?;
    let e = g.scale(e, endpoint);
    g.add(d, e)
}

/// Every generated trajectory fitted to every ground-truth path, averaged
/// over the generated set.
pub fn mean_reconstruction_var(g: &mut Graph<'_>, traj: &[Var], gt: &[Var], endpoint: f64) -> Result<Var> {
    let mut terms = Vec::with_capacity(gt.len() * traj.len());
    for &t in gt {
        for &p in traj {
            terms.push(fit_var(g, p, t, endpoint)?);
        }
    }
    let s = g.add_all(&terms)?.unwrap_or_else(|| g.scalar(0.0));
    Ok(g.scale(s, 1.0 / traj.len() as f64))
}

/// `Σ exp(−d)` over distinct effective pairs plus, for each redundant
/// trajectory, `1 − exp(−d)` to its nearest effective trajectory.
pub fn diversity_var(g: &mut Graph<'_>, traj: &[Var], assignment: &Assignment) -> Result<Var> {
    let eff = assignment.effective_set();
    let mut terms = Vec::new();
    for (i, &a) in eff.iter().enumerate() {
        for &b in &eff[i + 1..] {
            let d = aligned_distance_var(g, traj[a], traj[b])?;
            let n = g.neg(d);
            terms.push(g.exp(n));
        }
    }
    let pts = |g: &Graph<'_>, v: Var| -> Vec<[f64; 2]> { g.value(v).chunks(2).map(|c| [c[0], c[1]]).collect() };
    for &o in &assignment.redundant {
        let po = pts(g, traj[o]);
        let mut nearest = eff[0];
        let mut best = f64::INFINITY;
        for &c in &eff {
            let d = aligned_distance(&po, &pts(g, traj[c]));
            if d < best {
                best = d;
                nearest = c;
            }
        }
        let d = aligned_distance_var(g, traj[o], traj[nearest])?;
        let n = g.neg(d);
        let e = g.exp(n);
        let pull = g.scale(e, -1.0);
        terms.push(g.offset(pull, 1.0));
    }
    Ok(g.add_all(&terms)?.unwrap_or_else(|| g.scalar(0.0)))
}

/// `Σ exp(−d)` over all unordered generated pairs.
pub fn pairwise_diversity_var(g: &mut Graph<'_>, traj: &[Var]) -> Result<Var> {
    let mut terms = Vec::new();
    for i in 0..traj.len() {
        for j in i + 1..traj.len() {
            let d = aligned_distance_var(g, traj[i], traj[j])?;
            let n = g.neg(d);
            terms.push(g.exp(n));
        }
    }
    Ok(g.add_all(&terms)?.unwrap_or_else(|| g.scalar(0.0)))
}

/// Per trajectory `exp(1 − clamp(m, 0, 1)) − 1`, `m` the mean signed
/// clearance of its waypoints, summed over trajectories.
pub fn traversability_var(g: &mut Graph<'_>, traj: &[Var], sdf: &DistanceField, pose: &RobotPose) -> Result<Var> {
    let (s, c) = pose.heading.sin_cos();
    let mut terms = Vec::with_capacity(traj.len());
    for &t in traj {
        let f = g.field(t, |p| {
            let w = pose.to_world(p);
            let (v, gw) = sdf.sample(w[0], w[1]);
            (v, [c * gw[0] + s * gw[1], -s * gw[0] + c * gw[1]])
        })?;
        let m = g.mean(f);
        let m = g.clamp(m, 0.0, 1.0);
        let m = g.scale(m, -1.0);
        let m = g.offset(m, 1.0);
        let e = g.exp(m);
        terms.push(g.offset(e, -1.0));
    }
    Ok(g.add_all(&terms)?.unwrap_or_else(|| g.scalar(0.0)))
}

/// Per-scene inputs to the objective.
pub struct SceneTargets<'s> {
    pub gt: &'s GroundTruthSet,
    pub sdf: &'s DistanceField,
    pub pose: &'s RobotPose,
}

/// Taped term values for one scene.
pub struct SceneLoss {
    pub kl: Var,
    pub coverage: Var,
    pub diversity: Var,
    pub traversability: Var,
    pub assignment: Assignment,
}

/// Builds every enabled term for one scene. Disabled terms are constant zero.
pub fn scene_loss(
    g: &mut Graph<'_>,
    traj: &[Var],
    kl: Var,
    scene: &SceneTargets<'_>,
    terms: &LossTerms,
    w: &LossWeights,
) -> Result<SceneLoss> {
    if traj.is_empty() || scene.gt.is_empty() {
        return Err(Error::usage("loss needs generated and ground-truth trajectories"));
    }
    let gt = scene
        .gt
        .trajectories
        .iter()
        .map(|t| g.constant(vec![t.len(), 2], t.waypoints.iter().flatten().copied().collect()))
        .collect::<Result<Vec<_>>>()?;
    let assignment = assign_from_table(&table(g, traj, &gt)?, traj.len());
    let coverage = match terms.reconstruction {
        Reconstruction::Coverage => coverage_var(g, traj, &gt, &assignment, w.endpoint)?,
        Reconstruction::Mean => mean_reconstruction_var(g, traj, &gt, w.endpoint)?,
    };
    let diversity = match terms.diversity {
        Diversity::EffectiveRedundant => diversity_var(g, traj, &assignment)?,
        Diversity::AllPairs => pairwise_diversity_var(g, traj)?,
        Diversity::None => g.scalar(0.0),
    };
    let traversability = if terms.traversability {
        traversability_var(g, traj, scene.sdf, scene.pose)?
    } else {
        g.scalar(0.0)
    };
    Ok(SceneLoss {
        kl,
        coverage,
        diversity,
        traversability,
        assignment,
    })
}

/// Weighted total of a scene's terms.
pub fn weighted_total(g: &mut Graph<'_>, l: &SceneLoss, w: &LossWeights) -> Result<Var> {
    let kl = g.scale(l.kl, w.beta1);
    let fit = g.add(l.coverage, l.diversity)?;
    let fit = g.scale(fit, w.beta2);
    let tr = g.scale(l.traversability, w.beta3);
    let a = g.add(kl, fit)?;
    g.add(a, tr)
}

fn traj_vars(g: &mut Graph<'_>, set: &[Trajectory]) -> Result<Vec<Var>> {
    set.iter()
        .map(|t| g.constant(vec![t.len(), 2], t.waypoints.iter().flatten().copied().collect()))
        .collect()
}

/// Untaped coverage term for fixed trajectories.
pub fn coverage_loss(generated: &[Trajectory], gt: &GroundTruthSet, assignment: &Assignment, endpoint: f64) -> Result<f64> {
    let mut g = Graph::new();
    let traj = traj_vars(&mut g, generated)?;
    let gtv = traj_vars(&mut g, &gt.trajectories)?;
    let v = coverage_var(&mut g, &traj, &gtv, assignment, endpoint)?;
    Ok(g.item(v))
}

/// Untaped diversity term for fixed trajectories.
pub fn diversity_loss(generated: &[Trajectory], assignment: &Assignment) -> Result<f64> {
    let mut g = Graph::new();
    let traj = traj_vars(&mut g, generated)?;
    let v = diversity_var(&mut g, &traj, assignment)?;
    Ok(g.item(v))
}

/// Untaped traversability term for fixed trajectories.
pub fn traversability_loss(generated: &[Trajectory], sdf: &DistanceField, pose: &RobotPose) -> Result<f64> {
    let mut g = Graph::new();
    let traj = traj_vars(&mut g, generated)?;
    let v = traversability_var(&mut g, &traj, sdf, pose)?;
    Ok(g.item(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(y: f64, n: usize) -> Trajectory {
        Trajectory::new((0..n).map(|i| [i as f64, y]).collect())
    }

    #[test]
    fn hausdorff_examples() {
        let a = line(0.0, 6);
        assert_eq!(avg_hausdorff(&a.waypoints, &a.waypoints).unwrap(), 0.0);
        let b = line(2.0, 6);
        assert!((avg_hausdorff(&a.waypoints, &b.waypoints).unwrap() - 2.0).abs() < 1e-12);
        assert!(avg_hausdorff(&[], &a.waypoints).is_err());
    }

    #[test]
    fn assignment_counts() {
        let gen = vec![line(0.0, 4), line(3.0, 4), line(6.0, 4), line(9.0, 4), line(12.0, 4), line(15.0, 4)];
        let gt = GroundTruthSet {
            trajectories: vec![line(3.2, 4)],
            target_angles: vec![0.0],
        };
        let a = assign(&gen, &gt).unwrap();
        assert_eq!(a.effective, vec![1]);
        assert_eq!(a.redundant, vec![0, 2, 3, 4, 5]);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_term(&[0.0; 3], &[1.0; 3]).unwrap(), 0.0);
        assert!((kl_term(&[1.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(kl_term(&[0.0], &[0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn coverage_parallel_offset() {
        let gt = GroundTruthSet {
            trajectories: vec![line(0.0, 5)],
            target_angles: vec![0.0],
        };
        let gen = vec![line(2.0, 5)];
        let a = assign(&gen, &gt).unwrap();
        let v = coverage_loss(&gen, &gt, &a, 1.0).unwrap();
        assert!((v - 4.0).abs() < 1e-12);
        assert_eq!(coverage_loss(&gt.trajectories, &gt, &a, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn diversity_examples() {
        let same = vec![line(0.0, 4), line(0.0, 4)];
        let a = Assignment {
            effective: vec![0, 1],
            redundant: vec![],
        };
        assert_eq!(diversity_loss(&same, &a).unwrap(), 1.0);
        let far = vec![line(0.0, 4), line(10.0, 4)];
        assert!((diversity_loss(&far, &a).unwrap() - (-10f64).exp()).abs() < 1e-15);
        let r = Assignment {
            effective: vec![0],
            redundant: vec![1],
        };
        assert_eq!(diversity_loss(&same, &r).unwrap(), 0.0);
    }

    #[test]
    fn weighted_breakdown_sums() {
        let w = LossWeights::default();
        let b = LossBreakdown::weighted(2.0, 3.0, 0.5, 0.25, &w);
        assert!((b.total - (0.2 + 3.5 + 2.5)).abs() < 1e-15);
        let zero = LossWeights {
            beta1: 0.0,
            beta2: 0.0,
            beta3: 0.0,
            endpoint: 1.0,
        };
        assert_eq!(LossBreakdown::weighted(2.0, 3.0, 0.5, 0.25, &zero).total, 0.0);
    }
}
