//! Dataset construction, mini-batch optimisation of every model variant and
//! the variant comparison table.

mod dataset;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{
    build_dataset, load_split, read_dataset, scene_seed, write_dataset, DatasetConfig, DatasetRecord,
    GridRecord, LabeledScene, Split,
};

use crate::error::{Error, Result};
use crate::losses::{kl_var, scene_loss, weighted_total, LossBreakdown, LossWeights, SceneTargets};
use crate::metrics::{evaluate, Generator, MetricsReport};
use crate::model::{Mode, Model, ModelConfig};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Architecture; its `seed` is overwritten by [`TrainConfig::seed`].
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Latent draws per scene and step; the loss averages over them.
    pub latent_samples: usize,
    /// Stop after this many optimiser steps, if set.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 50,
            batch_size: 16,
            latent_samples: 1,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::usage(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("latent_samples", self.latent_samples),
        ] {
            if v == 0 {
                return Err(Error::usage(format!("{name} must be at least 1")));
            }
        }
        let betas = [self.adam_beta1, self.adam_beta2];
        if betas.iter().any(|b| !(0.0..1.0).contains(b)) || !(self.adam_eps > 0.0) {
            return Err(Error::usage("adam betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }
}

/// Adaptive-moment gradient descent with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// `grads[i]` is `None` for parameters the loss did not reach.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Vec<f64>>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                *x -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Batch-mean objective terms on a graph.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub total: Var,
    pub kl: Var,
    pub coverage: Var,
    pub diversity: Var,
    pub traversability: Var,
    pub guard_hits: usize,
}

impl Objective {
    pub fn breakdown(&self, g: &Graph<'_>) -> LossBreakdown {
        LossBreakdown {
            total: g.item(self.total),
            kl: g.item(self.kl),
            coverage: g.item(self.coverage),
            diversity: g.item(self.diversity),
            traversability: g.item(self.traversability),
        }
    }
}

/// Mean over scenes of the weighted per-scene objective, with the term set
/// chosen by the model kind. `noise[i]` belongs to `scenes[i]`.
pub fn objective(
    g: &mut Graph<'_>,
    model: &Model,
    v: &[Var],
    scenes: &[&LabeledScene],
    noise: &[Vec<f64>],
    weights: &LossWeights,
) -> Result<Objective> {
    let obs: Vec<_> = scenes.iter().map(|s| &s.observation).collect();
    let tape = model.tape(g, v, &obs, noise)?;
    let terms = model.kind().loss_terms();
    let mut parts: [Vec<Var>; 5] = Default::default();
    for (i, s) in scenes.iter().enumerate() {
        let mu = g.row(tape.mu, i)?;
        let logvar = g.row(tape.logvar, i)?;
        let kl = kl_var(g, mu, logvar)?;
        let targets = SceneTargets {
            gt: &s.ground_truth,
            sdf: &s.sdf,
            pose: &s.pose,
        };
        let l = scene_loss(g, &tape.trajectories[i], kl, &targets, &terms, weights)?;
        parts[0].push(weighted_total(g, &l, weights)?);
        parts[1].push(l.kl);
        parts[2].push(l.coverage);
        parts[3].push(l.diversity);
        parts[4].push(l.traversability);
    }
    let scale = 1.0 / scenes.len() as f64;
    let mut means = Vec::with_capacity(5);
    for p in &parts {
        let s = g.add_all(p)?.expect("at least one scene");
        means.push(g.scale(s, scale));
    }
    Ok(Objective {
        total: means[0],
        kl: means[1],
        coverage: means[2],
        diversity: means[3],
        traversability: means[4],
        guard_hits: tape.guard_hits,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub kl: f64,
    pub coverage: f64,
    pub diversity: f64,
    pub traversability: f64,
    pub guard_hits: usize,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepRecord>,
}

/// Seed of the shuffling and latent-noise stream, kept apart from the
/// per-tensor initialisation streams.
fn train_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Optimises a fresh model on `scenes`. Each step's term breakdown is
/// written to `log` as one JSON line; when `checkpoint_dir` is given the
/// model is saved to `checkpoint.ckpt` after every epoch and to `model.ckpt`
/// at the end.
pub fn train(
    config: &TrainConfig,
    scenes: &[LabeledScene],
    checkpoint_dir: Option<&Path>,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    config.validate()?;
    if scenes.is_empty() {
        return Err(Error::Dataset("no training scenes".into()));
    }
    let mut model = Model::new(config.model_config())?;
    let mut adam = Adam::new(
        model.params(),
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    );
    let mut rng = train_rng(config.seed);
    let mut records = Vec::new();
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        if config.max_steps.is_some_and(|m| step >= m) {
            break;
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let batch: Vec<&LabeledScene> = chunk
                .iter()
                .flat_map(|&i| std::iter::repeat_n(&scenes[i], config.latent_samples))
                .collect();
            let noise: Vec<Vec<f64>> = batch.iter().map(|_| model.noise(Mode::Sample, &mut rng)).collect();
            let (record, grads) = {
                let mut g = Graph::new();
                let v = model.bind(&mut g);
                let obj = objective(&mut g, &model, &v, &batch, &noise, &config.weights)?;
                let b = obj.breakdown(&g);
                if let Some(term) = b.first_non_finite() {
                    return Err(Error::NonFinite { term, step });
                }
                let mut grads = g.backward(obj.total)?;
                let grads: Vec<Option<Vec<f64>>> = v.iter().map(|&x| grads.take(x)).collect();
                if grads.iter().flatten().flatten().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { term: "gradient", step });
                }
                let r = StepRecord {
                    epoch,
                    step,
                    total: b.total,
                    kl: b.kl,
                    coverage: b.coverage,
                    diversity: b.diversity,
                    traversability: b.traversability,
                    guard_hits: obj.guard_hits,
                };
                (r, grads)
            };
            adam.step(model.params_mut(), &grads);
            serde_json::to_writer(&mut *log, &record)?;
            log.write_all(b"\n")?;
            records.push(record);
            step += 1;
        }
        if let Some(dir) = checkpoint_dir {
            model.save(&dir.join("checkpoint.ckpt"))?;
        }
    }
    log.flush()?;
    if let Some(dir) = checkpoint_dir {
        model.save(&dir.join("model.ckpt"))?;
    }
    Ok(TrainOutcome { model, log: records })
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub report: MetricsReport,
}

/// Trains every config on `train_scenes` and evaluates it on `test_scenes`,
/// after a ground-truth row.
pub fn compare_variants(
    train_scenes: &[LabeledScene],
    test_scenes: &[LabeledScene],
    configs: &[TrainConfig],
    eval_seed: u64,
) -> Result<Vec<ComparisonRow>> {
    if configs.len() < 2 {
        return Err(Error::usage("comparison needs at least two variants"));
    }
    let mut rows = vec![ComparisonRow {
        name: "ground-truth".into(),
        report: evaluate(&Generator::Oracle, test_scenes, eval_seed)?,
    }];
    for c in configs {
        let out = train(c, train_scenes, None, &mut std::io::sink())?;
        let report = evaluate(
            &Generator::Model {
                model: &out.model,
                mode: Mode::Sample,
            },
            test_scenes,
            eval_seed,
        )?;
        rows.push(ComparisonRow {
            name: c.model.kind.name().into(),
            report,
        });
    }
    Ok(rows)
}

/// Plain-text table with one row per variant.
pub fn format_table(rows: &[ComparisonRow]) -> String {
    let mut s = format!("{:<14} {:>10} {:>10} {:>10} {:>10}\n", "model", "r_n", "r_c", "r_d", "t_ms");
    for r in rows {
        let d = r.report.r_d.map_or_else(|| "-".to_string(), |d| format!("{d:.4}"));
        s.push_str(&format!(
            "{:<14} {:>10.4} {:>10.4} {:>10} {:>10.3}\n",
            r.name, r.report.r_n, r.report.r_c, d, r.report.t_ms
        ));
    }
    s
}
