//! The `mtglab` command line: dataset generation, training, evaluation,
//! inference and plotting.
//!
//! Every option resolves as command-line flag, then `MTGLAB_<KEY>`
//! environment variable, then `key = value` line of the `--config` file,
//! then built-in default.

pub mod render;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::env::{observe, read_scene, RobotPose, SensorConfig, TraversabilityGrid, Velocity};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::{evaluate, Generator};
use crate::model::{confidence, Mode, Model, ModelConfig};
use crate::oracle::{build_ground_truth, FanConfig, Trajectory};
use crate::trainer::{
    build_dataset, format_table, load_split, read_dataset, train, write_dataset, ComparisonRow,
    DatasetConfig, LabeledScene, Split, TrainConfig,
};
use render::{Layers, PlotInput, PlotSpec};

#[derive(Debug, Parser)]
#[command(name = "mtglab", version, about = "Traversability-aware multi-trajectory generation")]
pub struct Cli {
    /// File of `key = value` defaults, keyed like the long flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled scene dataset as JSON lines.
    GenData(GenDataArgs),
    /// Train one model variant on a dataset's train split.
    Train(TrainArgs),
    /// Score checkpoints (and optionally the ground truth) on a dataset split.
    Eval(EvalArgs),
    /// Generate trajectories for one scene and print them as JSON.
    Infer(InferArgs),
    /// Render a scene with its trajectories as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub beams: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub velocities: Option<usize>,
    #[arg(long)]
    pub r_max: Option<f64>,
    #[arg(long)]
    pub waypoints: Option<usize>,
    /// Target arc radius, meters.
    #[arg(long)]
    pub horizon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// cvae, dlow, mtg1 or mtg.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub trajectories: Option<usize>,
    #[arg(long)]
    pub r_max: Option<f64>,
    #[arg(long)]
    pub cond_dim: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub velocity_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub latent_samples: Option<usize>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub beta3: Option<f64>,
    #[arg(long)]
    pub endpoint: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to score; repeatable.
    #[arg(long)]
    pub ckpt: Vec<PathBuf>,
    /// Add a row that replays the ground truth as if it were a model.
    #[arg(long)]
    pub ground_truth: bool,
    /// train or test.
    #[arg(long)]
    pub split: Option<String>,
    /// sample or mean.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Leave wall-clock timings out so reruns print identical reports.
    #[arg(long)]
    pub no_timing: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Where a single scene comes from.
#[derive(Debug, Args)]
pub struct SceneSource {
    /// Scene file; the robot is taken as standing still at its pose.
    #[arg(long, conflicts_with = "data")]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Scene index within `--split` of `--data`.
    #[arg(long)]
    pub index: Option<usize>,
    #[arg(long)]
    pub split: Option<String>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[command(flatten)]
    pub source: SceneSource,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[command(flatten)]
    pub source: SceneSource,
    /// Model whose trajectories are drawn; omit for ground truth only.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pixels per meter.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Comma-separated subset of grid,gt,generated,beams,confidence.
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Keys accepted in a config file.
const KNOWN_KEYS: &[&str] = &[
    "out", "scenes", "seed", "train-fraction", "beams", "frames", "velocities", "r-max", "waypoints",
    "horizon", "data", "kind", "trajectories", "cond-dim", "latent-dim", "velocity-dim", "hidden-dim",
    "lr", "epochs", "batch-size", "max-steps", "latent-samples", "beta1", "beta2", "beta3", "endpoint",
    "ckpt", "split", "mode", "scene", "index", "scale", "layers",
];

/// Config-file and environment layers below the command-line flags.
#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut file = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("config line {}: expected key = value", i + 1)))?;
            let k = k.trim().replace('_', "-");
            if !KNOWN_KEYS.contains(&k.as_str()) {
                return Err(Error::usage(format!("config line {}: unknown key `{k}`", i + 1)));
            }
            file.insert(k, v.trim().to_string());
        }
        Ok(Settings { file })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Settings::default()),
            Some(p) => Settings::parse(&std::fs::read_to_string(p)?),
        }
    }

    fn raw(&self, key: &str) -> Option<(String, String)> {
        let var = format!("MTGLAB_{}", key.to_uppercase().replace('-', "_"));
        if let Ok(v) = std::env::var(&var) {
            return Some((v, var));
        }
        self.file.get(key).map(|v| (v.clone(), format!("config key `{key}`")))
    }

    /// Flag value, else the lower layers.
    pub fn get<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.raw(key) {
            None => Ok(None),
            Some((v, origin)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::usage(format!("{origin}: cannot parse `{v}`"))),
        }
    }

    pub fn or<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        Ok(self.get(key, flag)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<T> {
        self.get(key, flag)?
            .ok_or_else(|| Error::usage(format!("missing required option --{key}")))
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 2 on usage errors, 1 otherwise.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.exit_code() == 0 {
                let _ = write!(stdout, "{}", e.render());
                return 0;
            }
            let _ = write!(stderr, "{}", e.render());
            return 2;
        }
    };
    match dispatch(cli, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            match e {
                Error::Usage(_) => 2,
                _ => 1,
            }
        }
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let s = Settings::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => gen_data(&s, a, out, err),
        Command::Train(a) => train_cmd(&s, a, out),
        Command::Eval(a) => eval_cmd(&s, a, out),
        Command::Infer(a) => infer_cmd(&s, a, out),
        Command::Plot(a) => plot_cmd(&s, a, out),
    }
}

fn gen_data(s: &Settings, a: GenDataArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let path: PathBuf = s.require("out", a.out)?;
    let sensor_default = SensorConfig::default();
    let fan_default = FanConfig::default();
    let cfg = DatasetConfig {
        scenes: s.or("scenes", a.scenes, 500)?,
        train_fraction: s.or("train-fraction", a.train_fraction, 0.8)?,
        seed: s.or("seed", a.seed, 0)?,
        sensor: SensorConfig {
            beams: s.or("beams", a.beams, sensor_default.beams)?,
            frames: s.or("frames", a.frames, sensor_default.frames)?,
            velocities: s.or("velocities", a.velocities, sensor_default.velocities)?,
            r_max: s.or("r-max", a.r_max, sensor_default.r_max)?,
            ..sensor_default
        },
        fan: FanConfig {
            waypoints: s.or("waypoints", a.waypoints, fan_default.waypoints)?,
            horizon: s.or("horizon", a.horizon, fan_default.horizon)?,
            ..fan_default
        },
    };
    let records = build_dataset(&cfg, &mut |m| {
        let _ = writeln!(err, "{m}");
    })?;
    write_dataset(BufWriter::new(File::create(&path)?), &records)?;
    let n_train = records.iter().filter(|r| r.split == Split::Train).count();
    writeln!(
        out,
        "wrote {} scenes ({} train, {} test) to {}",
        records.len(),
        n_train,
        records.len() - n_train,
        path.display()
    )?;
    Ok(())
}

fn parse_split(s: &Settings, flag: Option<String>, default: Split) -> Result<Split> {
    match s.get::<String>("split", flag)?.as_deref() {
        None => Ok(default),
        Some("train") => Ok(Split::Train),
        Some("test") => Ok(Split::Test),
        Some(other) => Err(Error::usage(format!("unknown split `{other}`, expected train or test"))),
    }
}

fn load_scenes(path: &Path, split: Split) -> Result<Vec<LabeledScene>> {
    let records = read_dataset(BufReader::new(File::open(path)?))?;
    let scenes = load_split(&records, split)?;
    if scenes.is_empty() {
        return Err(Error::Dataset(format!("{} has no {split:?} scenes", path.display())));
    }
    Ok(scenes)
}

fn train_cmd(s: &Settings, a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let data: PathBuf = s.require("data", a.data)?;
    let dir: PathBuf = s.require("out", a.out)?;
    let scenes = load_scenes(&data, Split::Train)?;
    let first = &scenes[0];
    let d = ModelConfig::default();
    let w = LossWeights::default();
    let t = TrainConfig::default();
    let model = ModelConfig {
        kind: s.or("kind", a.kind, "mtg".to_string())?.parse()?,
        trajectories: s.or("trajectories", a.trajectories, d.trajectories)?,
        waypoints: first.ground_truth.trajectories[0].len(),
        beams: first.observation.scans.first().map_or(0, Vec::len),
        frames: first.observation.scans.len(),
        velocities: first.observation.velocities.len(),
        cond_dim: s.or("cond-dim", a.cond_dim, d.cond_dim)?,
        latent_dim: s.or("latent-dim", a.latent_dim, d.latent_dim)?,
        velocity_dim: s.or("velocity-dim", a.velocity_dim, d.velocity_dim)?,
        hidden_dim: s.or("hidden-dim", a.hidden_dim, d.hidden_dim)?,
        r_max: s.or("r-max", a.r_max, d.r_max)?,
        ..d
    };
    let config = TrainConfig {
        model,
        weights: LossWeights {
            beta1: s.or("beta1", a.beta1, w.beta1)?,
            beta2: s.or("beta2", a.beta2, w.beta2)?,
            beta3: s.or("beta3", a.beta3, w.beta3)?,
            endpoint: s.or("endpoint", a.endpoint, w.endpoint)?,
        },
        learning_rate: s.or("lr", a.lr, t.learning_rate)?,
        epochs: s.or("epochs", a.epochs, t.epochs)?,
        batch_size: s.or("batch-size", a.batch_size, t.batch_size)?,
        latent_samples: s.or("latent-samples", a.latent_samples, t.latent_samples)?,
        max_steps: s.get("max-steps", a.max_steps)?,
        seed: s.or("seed", a.seed, t.seed)?,
        ..t
    };
    config.validate()?;
    std::fs::create_dir_all(&dir)?;
    let mut log = BufWriter::new(File::create(dir.join("train.log.jsonl"))?);
    let outcome = train(&config, &scenes, Some(&dir), &mut log)?;
    let last = outcome.log.last();
    writeln!(
        out,
        "trained {} for {} steps, final loss {:.6}; checkpoint {}",
        config.model.kind,
        outcome.log.len(),
        last.map_or(f64::NAN, |r| r.total),
        dir.join("model.ckpt").display()
    )?;
    Ok(())
}

fn parse_mode(s: &Settings, flag: Option<String>, default: Mode) -> Result<Mode> {
    match s.get::<String>("mode", flag)? {
        Some(m) => m.parse(),
        None => Ok(default),
    }
}

#[derive(Serialize)]
struct ReportLine<'r> {
    name: &'r str,
    r_n: f64,
    r_c: f64,
    r_d: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    t_ms: Option<f64>,
    n_scenes: usize,
}

fn eval_cmd(s: &Settings, a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let data: PathBuf = s.require("data", a.data)?;
    let mut ckpts = a.ckpt;
    if ckpts.is_empty() {
        if let Some(c) = s.get::<PathBuf>("ckpt", None)? {
            ckpts.push(c);
        }
    }
    if ckpts.is_empty() && !a.ground_truth {
        return Err(Error::usage("nothing to evaluate: pass --ckpt or --ground-truth"));
    }
    let split = parse_split(s, a.split, Split::Test)?;
    let mode = parse_mode(s, a.mode, Mode::Sample)?;
    let seed = s.or("seed", a.seed, 0)?;
    let scenes = load_scenes(&data, split)?;
    let mut rows = Vec::new();
    if a.ground_truth {
        rows.push(ComparisonRow {
            name: "ground-truth".into(),
            report: evaluate(&Generator::Oracle, &scenes, seed)?,
        });
    }
    for c in &ckpts {
        let model = Model::load(c)?;
        let report = evaluate(&Generator::Model { model: &model, mode }, &scenes, seed)?;
        rows.push(ComparisonRow {
            name: c.display().to_string(),
            report,
        });
    }
    if a.no_timing {
        for r in &mut rows {
            r.report.t_ms = 0.0;
        }
    }
    let mut json = String::new();
    for r in &rows {
        let line = ReportLine {
            name: &r.name,
            r_n: r.report.r_n,
            r_c: r.report.r_c,
            r_d: r.report.r_d,
            t_ms: (!a.no_timing).then_some(r.report.t_ms),
            n_scenes: r.report.n_scenes,
        };
        json.push_str(&serde_json::to_string(&line)?);
        json.push('\n');
    }
    out.write_all(json.as_bytes())?;
    out.write_all(format_table(&rows).as_bytes())?;
    if let Some(p) = s.get::<PathBuf>("out", a.out)? {
        std::fs::write(p, json)?;
    }
    Ok(())
}

/// One scene ready for a model: the world, the pose, what the robot sees
/// and the ground truth used for plots.
struct LoadedScene {
    grid: TraversabilityGrid,
    pose: RobotPose,
    observation: crate::env::Observation,
    ground_truth: Vec<Trajectory>,
}

/// Observation of a robot that has stood still at `pose` for the whole history.
fn stationary_observation(grid: &TraversabilityGrid, pose: RobotPose, m: &ModelConfig) -> Result<crate::env::Observation> {
    let sensor = SensorConfig {
        beams: m.beams,
        frames: m.frames,
        velocities: m.velocities,
        r_max: m.r_max,
        ..SensorConfig::default()
    };
    let still = Velocity {
        linear: 0.0,
        angular: 0.0,
    };
    observe(grid, &vec![pose; m.frames], &vec![still; m.velocities], &sensor)
}

fn load_one(s: &Settings, src: SceneSource, model: Option<&ModelConfig>) -> Result<LoadedScene> {
    if let Some(path) = s.get::<PathBuf>("scene", src.scene)? {
        let (grid, pose, _) = read_scene(BufReader::new(File::open(&path)?))?;
        let fan = FanConfig {
            waypoints: model.map_or(FanConfig::default().waypoints, |m| m.waypoints),
            ..FanConfig::default()
        };
        let ground_truth = build_ground_truth(&grid, &pose, &fan)?.trajectories;
        let cfg = model.cloned().unwrap_or_default();
        let observation = stationary_observation(&grid, pose, &cfg)?;
        return Ok(LoadedScene {
            grid,
            pose,
            observation,
            ground_truth,
        });
    }
    let data: PathBuf = s
        .get("data", src.data)?
        .ok_or_else(|| Error::usage("pass --scene or --data"))?;
    let split = parse_split(s, src.split, Split::Test)?;
    let index = s.or("index", src.index, 0)?;
    let mut scenes = load_scenes(&data, split)?;
    if index >= scenes.len() {
        return Err(Error::usage(format!("index {index} out of range for {} scenes", scenes.len())));
    }
    let scene = scenes.swap_remove(index);
    Ok(LoadedScene {
        grid: scene.grid,
        pose: scene.pose,
        observation: scene.observation,
        ground_truth: scene.ground_truth.trajectories,
    })
}

#[derive(Serialize)]
struct InferOutput {
    kind: String,
    trajectories: Vec<Vec<[f64; 2]>>,
    confidence: Vec<f64>,
}

fn generate(model: &Model, scene: &LoadedScene, mode: Mode, seed: u64) -> Result<(Vec<Trajectory>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set = model.forward(&scene.observation, mode, &mut rng)?;
    let conf = set.latents.iter().map(|l| confidence(l).confidence).collect();
    Ok((set.trajectories, conf))
}

fn infer_cmd(s: &Settings, a: InferArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt: PathBuf = s.require("ckpt", a.ckpt)?;
    let model = Model::load(&ckpt)?;
    let scene = load_one(s, a.source, Some(model.config()))?;
    let mode = parse_mode(s, a.mode, Mode::Mean)?;
    let (trajectories, confidence) = generate(&model, &scene, mode, s.or("seed", a.seed, 0)?)?;
    let o = InferOutput {
        kind: model.kind().name().into(),
        trajectories: trajectories.into_iter().map(|t| t.waypoints).collect(),
        confidence,
    };
    serde_json::to_writer(&mut *out, &o)?;
    writeln!(out)?;
    Ok(())
}

fn plot_cmd(s: &Settings, a: PlotArgs, out: &mut dyn Write) -> Result<()> {
    let path: PathBuf = s.require("out", a.out)?;
    let layers = match s.get::<String>("layers", a.layers)? {
        Some(l) => Layers::parse(&l)?,
        None => Layers::default(),
    };
    let spec = PlotSpec {
        layers,
        scale: s.or("scale", a.scale, 10.0)?,
    };
    spec.validate()?;
    let model = s.get::<PathBuf>("ckpt", a.ckpt)?.map(|p| Model::load(&p)).transpose()?;
    let scene = load_one(s, a.source, model.as_ref().map(Model::config))?;
    let (generated, conf) = match &model {
        Some(m) => generate(m, &scene, parse_mode(s, a.mode, Mode::Mean)?, s.or("seed", a.seed, 0)?)?,
        None => (Vec::new(), Vec::new()),
    };
    let sensor = SensorConfig {
        beams: scene.observation.scans.last().map_or(0, Vec::len),
        ..SensorConfig::default()
    };
    let input = PlotInput {
        grid: &scene.grid,
        pose: &scene.pose,
        ground_truth: &scene.ground_truth,
        generated: &generated,
        confidence: &conf,
        beams: scene.observation.scans.last().map(|r| (r.as_slice(), &sensor)),
    };
    render::render_to_file(&input, &spec, &path)?;
    writeln!(out, "wrote {}", path.display())?;
    Ok(())
}
