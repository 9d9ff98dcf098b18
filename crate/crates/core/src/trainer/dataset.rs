//! Scene datasets: generation, JSON-lines IO and loading into memory.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{
    generate_scene, DistanceField, Observation, RobotPose, SceneKindTag, SceneSpec, SensorConfig,
    TraversabilityGrid,
};
use crate::error::{Error, Result};
use crate::oracle::{build_ground_truth, FanConfig, GroundTruthSet, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Train scenes use seeds `base·2³² + i`, test scenes `base·2³² + 2³¹ + i`,
/// with `i < 2³¹`, so the two ranges never meet.
pub fn scene_seed(base: u64, split: Split, index: u64) -> u64 {
    assert!(index < 1 << 31, "scene index {index} out of range");
    let offset = match split {
        Split::Train => 0,
        Split::Test => 1 << 31,
    };
    (base << 32) | offset | index
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Kept scenes across both splits.
    pub scenes: usize,
    /// Fraction of kept scenes in the train split.
    pub train_fraction: f64,
    pub seed: u64,
    pub sensor: SensorConfig,
    pub fan: FanConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scenes: 500,
            train_fraction: 0.8,
            seed: 0,
            sensor: SensorConfig::default(),
            fan: FanConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub width: usize,
    pub height: usize,
    pub resolution: f64,
    /// One run-length row per grid row, bottom row first.
    pub rows: Vec<String>,
}

/// One dataset line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub split: Split,
    pub spec: SceneSpec,
    pub grid: GridRecord,
    pub pose: RobotPose,
    pub observation: Observation,
    /// Robot-frame waypoints per ground-truth trajectory.
    pub ground_truth: Vec<Vec<[f64; 2]>>,
    pub target_angles: Vec<f64>,
}

/// A scene ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct LabeledScene {
    pub grid: TraversabilityGrid,
    pub pose: RobotPose,
    pub observation: Observation,
    pub ground_truth: GroundTruthSet,
    pub sdf: DistanceField,
}

impl LabeledScene {
    pub fn new(grid: TraversabilityGrid, pose: RobotPose, observation: Observation, ground_truth: GroundTruthSet) -> Self {
        let sdf = grid.signed_distance();
        LabeledScene {
            grid,
            pose,
            observation,
            ground_truth,
            sdf,
        }
    }

    pub fn from_record(r: &DatasetRecord) -> Result<Self> {
        let grid = TraversabilityGrid::from_rle_rows(r.grid.width, r.grid.height, r.grid.resolution, &r.grid.rows)?;
        if r.ground_truth.is_empty() {
            return Err(Error::Dataset("record without ground truth".into()));
        }
        let gt = GroundTruthSet {
            trajectories: r.ground_truth.iter().cloned().map(Trajectory::new).collect(),
            target_angles: r.target_angles.clone(),
        };
        Ok(LabeledScene::new(grid, r.pose, r.observation.clone(), gt))
    }
}

/// Result of generating one candidate scene.
enum Candidate {
    Kept(Box<DatasetRecord>),
    Dropped(String),
}

fn candidate(split: Split, seed: u64, index: u64, cfg: &DatasetConfig) -> Result<Candidate> {
    let tag = SceneKindTag::ALL[(index % SceneKindTag::ALL.len() as u64) as usize];
    let spec = SceneSpec::sample(tag, seed);
    let scene = match generate_scene(&spec) {
        Ok(s) => s,
        Err(Error::Generation(why)) => return Ok(Candidate::Dropped(format!("seed {seed} ({tag}): {why}"))),
        Err(e) => return Err(e),
    };
    let gt = build_ground_truth(&scene.grid, &scene.pose, &cfg.fan)?;
    if gt.is_empty() {
        return Ok(Candidate::Dropped(format!("seed {seed} ({tag}): empty ground truth")));
    }
    let observation = scene.observe(&cfg.sensor)?;
    let g = &scene.grid;
    Ok(Candidate::Kept(Box::new(DatasetRecord {
        split,
        grid: GridRecord {
            width: g.width(),
            height: g.height(),
            resolution: g.resolution(),
            rows: g.rle_rows(),
        },
        spec: scene.spec,
        pose: scene.pose,
        observation,
        ground_truth: gt.trajectories.into_iter().map(|t| t.waypoints).collect(),
        target_angles: gt.target_angles,
    })))
}

/// Generates `cfg.scenes` kept scenes, split by `cfg.train_fraction`.
/// Candidates that fail generation or have no ground truth are reported
/// through `log` and replaced by the next seed in the same range.
pub fn build_dataset(cfg: &DatasetConfig, log: &mut dyn FnMut(&str)) -> Result<Vec<DatasetRecord>> {
    if cfg.scenes < 2 {
        return Err(Error::usage(format!("need at least 2 scenes, got {}", cfg.scenes)));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::usage(format!("train fraction must lie in (0, 1), got {}", cfg.train_fraction)));
    }
    let n_train = ((cfg.scenes as f64 * cfg.train_fraction).round() as usize).clamp(1, cfg.scenes - 1);
    let mut records = Vec::with_capacity(cfg.scenes);
    let mut seeds = [HashSet::new(), HashSet::new()];
    for (split, quota) in [(Split::Train, n_train), (Split::Test, cfg.scenes - n_train)] {
        let budget = 4 * quota as u64 + 16;
        let mut next = 0u64;
        let mut kept = 0;
        while kept < quota && next < budget {
            let end = (next + (quota - kept) as u64).min(budget);
            let batch: Vec<_> = (next..end)
                .into_par_iter()
                .map(|i| {
                    let seed = scene_seed(cfg.seed, split, i);
                    candidate(split, seed, i, cfg).map(|c| (seed, c))
                })
                .collect::<Result<_>>()?;
            next = end;
            for (seed, c) in batch {
                match c {
                    Candidate::Kept(r) if kept < quota => {
                        seeds[split as usize].insert(seed);
                        records.push(*r);
                        kept += 1;
                    }
                    Candidate::Kept(_) => {}
                    Candidate::Dropped(why) => log(&format!("dropped {why}")),
                }
            }
        }
        if kept < quota {
            log(&format!("{split:?}: only {kept} of {quota} scenes kept"));
        }
    }
    if records.is_empty() {
        return Err(Error::Dataset("every candidate scene was dropped".into()));
    }
    if !seeds[0].is_disjoint(&seeds[1]) {
        return Err(Error::Dataset("train and test seeds overlap".into()));
    }
    Ok(records)
}

pub fn write_dataset<W: Write>(mut w: W, records: &[DatasetRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("line {}: {e}", i + 1)))?,
        );
    }
    if out.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    Ok(out)
}

/// Loads every record of one split.
pub fn load_split(records: &[DatasetRecord], split: Split) -> Result<Vec<LabeledScene>> {
    records
        .par_iter()
        .filter(|r| r.split == split)
        .map(LabeledScene::from_record)
        .collect()
}
