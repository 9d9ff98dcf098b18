//! Conditional VAE that turns one observation into K trajectories.
//!
//! Pipeline: `encode` (scan and velocity branches fused into a condition `c`,
//! plus mean/log-variance heads) → reparameterised sample `z` →
//! `transform_latents` (`z_k = A_k(c)·z + b_k(c)`) → `attend` (self-attention
//! across the K latents) → `decode` (one GRU per trajectory emitting
//! position deltas that are summed into waypoints).
//!
//! [`ModelKind`] selects the full model or one of its baselines.

mod checkpoint;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use checkpoint::manifest_path;

use crate::env::Observation;
use crate::error::{Error, Result};
use crate::losses::{Diversity, LossTerms, Reconstruction};
use crate::oracle::Trajectory;
use crate::tensor::{gru_cell, Graph, GruVars, Tensor, Var};

/// Below this `|det A_k|` a transform is replaced by the identity.
pub const DET_GUARD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Shared decoder, K independent latent draws.
    Cvae,
    /// Per-trajectory affine latent transforms, all-pairs diversity.
    Dlow,
    /// Full model without the attention stage.
    Mtg1,
    Mtg,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Cvae, ModelKind::Dlow, ModelKind::Mtg1, ModelKind::Mtg];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cvae => "cvae",
            ModelKind::Dlow => "dlow",
            ModelKind::Mtg1 => "mtg1",
            ModelKind::Mtg => "mtg",
        }
    }

    pub fn transforms(self) -> bool {
        self != ModelKind::Cvae
    }

    pub fn attention(self) -> bool {
        self == ModelKind::Mtg
    }

    pub fn shared_decoder(self) -> bool {
        self == ModelKind::Cvae
    }

    pub fn loss_terms(self) -> LossTerms {
        match self {
            ModelKind::Cvae => LossTerms {
                reconstruction: Reconstruction::Mean,
                diversity: Diversity::None,
                traversability: false,
            },
            ModelKind::Dlow => LossTerms {
                reconstruction: Reconstruction::Coverage,
                diversity: Diversity::AllPairs,
                traversability: false,
            },
            ModelKind::Mtg1 | ModelKind::Mtg => LossTerms {
                reconstruction: Reconstruction::Coverage,
                diversity: Diversity::EffectiveRedundant,
                traversability: true,
            },
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown model kind `{s}` (expected cvae, dlow, mtg1 or mtg)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Trajectories per observation (K).
    pub trajectories: usize,
    /// Waypoints per trajectory (S).
    pub waypoints: usize,
    pub beams: usize,
    pub frames: usize,
    pub velocities: usize,
    /// Condition width (d_c).
    pub cond_dim: usize,
    /// Latent width (d_z); also the attention width.
    pub latent_dim: usize,
    pub velocity_dim: usize,
    /// GRU state width.
    pub hidden_dim: usize,
    /// Scan normalisation range.
    pub r_max: f64,
    /// Init scale of the learned part of `A_k`.
    pub transform_gain: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Mtg,
            trajectories: 6,
            waypoints: 16,
            beams: 64,
            frames: 3,
            velocities: 10,
            cond_dim: 128,
            latent_dim: 64,
            velocity_dim: 64,
            hidden_dim: 64,
            r_max: 20.0,
            transform_gain: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for gradient checks and fast tests.
    pub fn tiny(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            trajectories: 2,
            waypoints: 4,
            beams: 8,
            frames: 3,
            velocities: 10,
            cond_dim: 8,
            latent_dim: 4,
            velocity_dim: 4,
            hidden_dim: 4,
            r_max: 20.0,
            transform_gain: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("trajectories", self.trajectories),
            ("waypoints", self.waypoints),
            ("beams", self.beams),
            ("frames", self.frames),
            ("velocities", self.velocities),
            ("cond_dim", self.cond_dim),
            ("latent_dim", self.latent_dim),
            ("velocity_dim", self.velocity_dim),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                return Err(Error::usage(format!("{name} must be at least 1")));
            }
        }
        if !(self.r_max > 0.0 && self.r_max.is_finite()) {
            return Err(Error::usage(format!("r_max must be positive, got {}", self.r_max)));
        }
        if !(self.transform_gain >= 0.0 && self.transform_gain.is_finite()) {
            return Err(Error::usage("transform_gain must be finite and ≥ 0"));
        }
        Ok(())
    }

    /// Noise values drawn per observation: one latent, or K for the shared-decoder CVAE.
    pub fn noise_len(&self) -> usize {
        if self.kind.transforms() {
            self.latent_dim
        } else {
            self.trajectories * self.latent_dim
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Sample,
    /// `z = mu`.
    Mean,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(Mode::Sample),
            "mean" => Ok(Mode::Mean),
            _ => Err(Error::usage(format!("unknown mode `{s}` (expected sample or mean)"))),
        }
    }
}

/// Latent statistics behind one generated trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub sigma: Vec<f64>,
    /// `A_k`, row-major `d_z × d_z`; identity when the variant has no transforms.
    pub transform: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSet {
    pub trajectories: Vec<Trajectory>,
    pub latents: Vec<LatentStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceReport {
    /// Diagonal latent variance `σ²`.
    pub variance: Vec<f64>,
    /// `A·diag(σ²)·Aᵀ`, row-major.
    pub covariance: Vec<f64>,
    /// `exp(−trace(covariance)/d_z)`, in [0, 1]. Underflows to 0 for wide latents.
    pub confidence: f64,
    /// `−trace(covariance)/d_z`, the exponent of `confidence`.
    pub log_confidence: f64,
}

/// Propagates the latent variance through `A_k`. The covariance is formed as
/// `B·Bᵀ` with `B = A·diag(σ)`, which keeps it exactly symmetric.
pub fn confidence(stats: &LatentStats) -> ConfidenceReport {
    let d = stats.sigma.len();
    let b: Vec<f64> = (0..d * d).map(|ij| stats.transform[ij] * stats.sigma[ij % d]).collect();
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] = (0..d).map(|t| b[i * d + t] * b[j * d + t]).sum();
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    ConfidenceReport {
        variance: stats.sigma.iter().map(|s| s * s).collect(),
        covariance: cov,
        confidence: (-trace / d as f64).exp(),
        log_confidence: -trace / d as f64,
    }
}

/// Model of the given kind name with otherwise shared settings.
pub fn baseline_variant(kind: &str, config: &ModelConfig) -> Result<Model> {
    Model::new(ModelConfig {
        kind: kind.parse()?,
        ..config.clone()
    })
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Transform {
    /// `[d_c·d_z, K·d_z]`: entry `(m·d_z + j, k·d_z + i)` is the weight from
    /// condition unit `m` to `A_k[i][j]`.
    a_weight: usize,
    /// `[d_z, K·d_z]`: entry `(j, k·d_z + i)` is the bias of `A_k[i][j]`.
    a_bias: usize,
    offset: Dense,
}

#[derive(Clone, Copy, Debug)]
struct Decoder {
    init: Dense,
    gru: [usize; 4],
    out: Dense,
}

#[derive(Clone, Debug)]
struct Layout {
    scan: [Dense; 2],
    velocity: [Dense; 3],
    fuse: [Dense; 2],
    hidden: Dense,
    mu: Dense,
    logvar: Dense,
    transform: Option<Transform>,
    attention: Option<[usize; 3]>,
    decoders: Vec<Decoder>,
}

/// 64-bit FNV-1a.
fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

struct Builder {
    seed: u64,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Builder {
    /// Every tensor draws from its own stream keyed by name, so adding or
    /// removing a stage leaves the other tensors' initial values unchanged.
    fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name))
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t.with_grad(true));
        self.params.len() - 1
    }

    fn uniform(&mut self, name: String, shape: [usize; 2], bound: f64) -> usize {
        let mut rng = self.rng(&name);
        let data = (0..shape[0] * shape[1])
            .map(|_| if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 })
            .collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape matches data");
        self.push(name, t)
    }

    fn glorot(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        let mut rng = self.rng(&name);
        let t = Tensor::glorot(fan_in, fan_out, 1.0, &mut rng);
        self.push(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.push(name, Tensor::zeros(shape))
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Dense {
        Dense {
            w: self.glorot(format!("{prefix}.weight"), fan_in, fan_out),
            b: self.zeros(format!("{prefix}.bias"), &[fan_out]),
        }
    }
}

/// Parameters plus stage wiring for one variant.
#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
    attend_calls: AtomicU64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            attend_calls: AtomicU64::new(self.attend_calls()),
        }
    }
}

/// Graph handles produced by one batched forward pass.
#[derive(Debug)]
pub struct Tape {
    /// `[scene][k]`, each `[S, 2]`.
    pub trajectories: Vec<Vec<Var>>,
    /// `[n, d_z]`.
    pub mu: Var,
    pub logvar: Var,
    /// `[scene][k]`.
    pub latents: Vec<Vec<LatentStats>>,
    /// Transforms replaced by the identity because `|det| < DET_GUARD`.
    pub guard_hits: usize,
}

/// Encoder outputs for a batch of `n` observations.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[n, d_c]`
    pub c: Var,
    /// `[n, d_z]`
    pub mu: Var,
    /// `[n, d_z]`
    pub logvar: Var,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            seed: config.seed,
            names: Vec::new(),
            params: Vec::new(),
        };
        let (dc, dz, dv, dh, k) = (
            config.cond_dim,
            config.latent_dim,
            config.velocity_dim,
            config.hidden_dim,
            config.trajectories,
        );
        let scan = [
            b.dense("encoder.scan.0", config.frames * config.beams, dc),
            b.dense("encoder.scan.1", dc, dc),
        ];
        let velocity = [
            b.dense("encoder.velocity.0", 2 * config.velocities, dv),
            b.dense("encoder.velocity.1", dv, dv),
            b.dense("encoder.velocity.2", dv, dv),
        ];
        let fuse = [b.dense("encoder.fuse.0", dc + dv, dc), b.dense("encoder.fuse.1", dc, dc)];
        let hidden = b.dense("head.hidden", dc, dc);
        let mu = b.dense("head.mu", dc, dz);
        let logvar = b.dense("head.logvar", dc, dz);
        let transform = config.kind.transforms().then(|| {
            let bound = config.transform_gain * (6.0 / (dc + k * dz * dz) as f64).sqrt();
            Transform {
                a_weight: b.uniform("transform.a.weight".into(), [dc * dz, k * dz], bound),
                a_bias: b.zeros("transform.a.bias".into(), &[dz, k * dz]),
                offset: b.dense("transform.b", dc, k * dz),
            }
        });
        let attention = config.kind.attention().then(|| {
            ["query", "key", "value"].map(|p| b.glorot(format!("attention.{p}"), dz, dz))
        });
        let decoders = if config.kind.shared_decoder() { 1 } else { k };
        let decoders = (0..decoders)
            .map(|i| {
                let p = if config.kind.shared_decoder() {
                    "decoder.shared".to_string()
                } else {
                    format!("decoder.{i}")
                };
                Decoder {
                    init: b.dense(&format!("{p}.init"), 2 * dz + dc, dh),
                    gru: [
                        b.glorot(format!("{p}.gru.w_ih"), 2, 3 * dh),
                        b.glorot(format!("{p}.gru.w_hh"), dh, 3 * dh),
                        b.zeros(format!("{p}.gru.b_ih"), &[3 * dh]),
                        b.zeros(format!("{p}.gru.b_hh"), &[3 * dh]),
                    ],
                    out: b.dense(&format!("{p}.out"), dh, 2),
                }
            })
            .collect();
        Ok(Model {
            config,
            names: b.names,
            params: b.params,
            layout: Layout {
                scan,
                velocity,
                fuse,
                hidden,
                mu,
                logvar,
                transform,
                attention,
                decoders,
            },
            attend_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Number of `attend` invocations since construction.
    pub fn attend_calls(&self) -> u64 {
        self.attend_calls.load(Ordering::Relaxed)
    }

    /// Registers every parameter on `g`, in [`Model::names`] order.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Vec<Var> {
        self.params.iter().map(|t| g.param(t)).collect()
    }

    /// Flattened, normalised scan and velocity rows for a batch.
    pub fn inputs(&self, g: &mut Graph<'_>, obs: &[&Observation]) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let mut scans = Vec::with_capacity(obs.len() * cfg.frames * cfg.beams);
        let mut vel = Vec::with_capacity(obs.len() * 2 * cfg.velocities);
        for o in obs {
            if o.scans.len() != cfg.frames || o.scans.iter().any(|s| s.len() != cfg.beams) || o.velocities.len() != cfg.velocities {
                return Err(Error::usage(format!(
                    "observation has {} frames of {:?} beams and {} velocities; model expects {}×{} and {}",
                    o.scans.len(),
                    o.scans.iter().map(Vec::len).collect::<Vec<_>>(),
                    o.velocities.len(),
                    cfg.frames,
                    cfg.beams,
                    cfg.velocities
                )));
            }
            let (s, v) = o.features(cfg.r_max);
            scans.extend(s);
            vel.extend(v);
        }
        let n = obs.len();
        Ok((
            g.constant(vec![n, cfg.frames * cfg.beams], scans)?,
            g.constant(vec![n, 2 * cfg.velocities], vel)?,
        ))
    }

    fn dense(&self, g: &mut Graph<'_>, v: &[Var], x: Var, d: Dense) -> Result<Var> {
        g.linear(x, v[d.w], v[d.b])
    }

    fn mlp(&self, g: &mut Graph<'_>, v: &[Var], mut x: Var, layers: &[Dense]) -> Result<Var> {
        for &d in layers {
            let y = self.dense(g, v, x, d)?;
            x = g.tanh(y);
        }
        Ok(x)
    }

    /// Scan and velocity branches fused into `c`, then the mean and
    /// log-variance heads.
    pub fn encode(&self, g: &mut Graph<'_>, v: &[Var], scans: Var, vel: Var) -> Result<Encoded> {
        let l = &self.layout;
        let s = self.mlp(g, v, scans, &l.scan)?;
        let u = self.mlp(g, v, vel, &l.velocity)?;
        let f = g.concat(&[s, u], 1)?;
        let c = self.mlp(g, v, f, &l.fuse)?;
        let h = self.mlp(g, v, c, &[l.hidden])?;
        let mu = self.dense(g, v, h, l.mu)?;
        let logvar = self.dense(g, v, h, l.logvar)?;
        Ok(Encoded { c, mu, logvar })
    }

    /// `A_k` for each of the `n` condition rows in `c`, row-major per k,
    /// before the guard.
    fn transform_values(&self, c: &[f64], n: usize) -> Vec<Vec<Vec<f64>>> {
        let t = self.layout.transform.expect("variant has transforms");
        let (dc, dz, k) = (self.config.cond_dim, self.config.latent_dim, self.config.trajectories);
        let (w, bias) = (self.params[t.a_weight].data(), self.params[t.a_bias].data());
        let cols = k * dz;
        // acc[r][j·cols + k·dz + i] accumulates A_k[i][j] of row r; each
        // weight row is read once for the whole batch.
        let mut acc = vec![bias.to_vec(); n];
        for m in 0..dc {
            for j in 0..dz {
                let row = &w[(m * dz + j) * cols..(m * dz + j + 1) * cols];
                for (r, a) in acc.iter_mut().enumerate() {
                    let cm = c[r * dc + m];
                    if cm == 0.0 {
                        continue;
                    }
                    for (x, &y) in a[j * cols..(j + 1) * cols].iter_mut().zip(row) {
                        *x += cm * y;
                    }
                }
            }
        }
        acc.into_iter()
            .map(|a| {
                (0..k)
                    .map(|kk| {
                        let mut out = vec![0.0; dz * dz];
                        for i in 0..dz {
                            for j in 0..dz {
                                out[i * dz + j] = a[j * cols + kk * dz + i] + if i == j { 1.0 } else { 0.0 };
                            }
                        }
                        out
                    })
                    .collect()
            })
            .collect()
    }

    /// `z_k = A_k(c)·z + b_k(c)` for every row, returned as `[n, K·d_z]`
    /// together with each row's `A_k` values. A transform with
    /// `|det A_k| < DET_GUARD` falls back to `A_k = I`.
    pub fn transform_latents(&self, g: &mut Graph<'_>, v: &[Var], c: Var, z: Var) -> Result<(Var, Vec<Vec<Vec<f64>>>, usize)> {
        let t = self
            .layout
            .transform
            .ok_or_else(|| Error::usage(format!("{} has no latent transforms", self.kind())))?;
        let (dz, k) = (self.config.latent_dim, self.config.trajectories);
        let n = g.shape(c)[0];
        let mut values = self.transform_values(g.value(c), n);
        let mut mask = vec![1.0; n * k * dz];
        let mut hits = 0;
        for (r, a) in values.iter_mut().enumerate() {
            for (kk, ak) in a.iter_mut().enumerate() {
                if determinant(ak, dz).abs() < DET_GUARD {
                    hits += 1;
                    *ak = identity(dz);
                    mask[r * k * dz + kk * dz..r * k * dz + (kk + 1) * dz].fill(0.0);
                }
            }
        }
        let u = g.outer_rows(c, z)?;
        let wz = g.matmul(u, v[t.a_weight])?;
        let bz = g.matmul(z, v[t.a_bias])?;
        let mut learned = g.add(wz, bz)?;
        if hits > 0 {
            let m = g.constant(vec![n, k * dz], mask)?;
            learned = g.mul(learned, m)?;
        }
        let offset = self.dense(g, v, c, t.offset)?;
        let tiled = g.concat(&vec![z; k], 1)?;
        let zk = g.add(tiled, learned)?;
        Ok((g.add(zk, offset)?, values, hits))
    }

    /// Single-head scaled dot-product self-attention over the rows of
    /// `latents: [K, d_z]`.
    pub fn attend(&self, g: &mut Graph<'_>, v: &[Var], latents: Var) -> Result<Var> {
        let [q, k, val] = self
            .layout
            .attention
            .ok_or_else(|| Error::usage(format!("{} has no attention stage", self.kind())))?;
        self.attend_calls.fetch_add(1, Ordering::Relaxed);
        let qs = g.matmul(latents, v[q])?;
        let ks = g.matmul(latents, v[k])?;
        let vs = g.matmul(latents, v[val])?;
        let kt = g.transpose(ks)?;
        let scores = g.matmul(qs, kt)?;
        let scores = g.scale(scores, 1.0 / (self.config.latent_dim as f64).sqrt());
        let weights = g.softmax(scores, 1)?;
        g.matmul(weights, vs)
    }

    /// Unrolls decoder `index` from `input: [n, 2·d_z + d_c]` and returns the
    /// accumulated waypoints `[n, S, 2]`.
    pub fn decode(&self, g: &mut Graph<'_>, v: &[Var], index: usize, input: Var) -> Result<Var> {
        let d = self.layout.decoders[if self.kind().shared_decoder() { 0 } else { index }];
        let n = g.shape(input)[0];
        let gru = GruVars {
            w_ih: v[d.gru[0]],
            w_hh: v[d.gru[1]],
            b_ih: v[d.gru[2]],
            b_hh: v[d.gru[3]],
        };
        let h0 = self.dense(g, v, input, d.init)?;
        let mut h = g.tanh(h0);
        let mut x = g.constant(vec![n, 2], vec![0.0; 2 * n])?;
        let mut deltas = Vec::with_capacity(self.config.waypoints);
        for _ in 0..self.config.waypoints {
            h = gru_cell(g, x, h, &gru)?;
            x = self.dense(g, v, h, d.out)?;
            deltas.push(x);
        }
        let all = g.concat(&deltas, 1)?;
        let all = g.reshape(all, &[n, self.config.waypoints, 2])?;
        g.cumsum(all, 1)
    }

    /// Full batched forward pass. `noise[i]` holds [`ModelConfig::noise_len`]
    /// standard-normal draws for observation `i` (zeros for mean mode).
    pub fn tape(&self, g: &mut Graph<'_>, v: &[Var], obs: &[&Observation], noise: &[Vec<f64>]) -> Result<Tape> {
        let cfg = &self.config;
        let (n, k, dz) = (obs.len(), cfg.trajectories, cfg.latent_dim);
        if n == 0 || noise.len() != n || noise.iter().any(|e| e.len() != cfg.noise_len()) {
            return Err(Error::usage(format!(
                "need one noise vector of length {} per observation",
                cfg.noise_len()
            )));
        }
        let (scans, vel) = self.inputs(g, obs)?;
        let enc = self.encode(g, v, scans, vel)?;
        let half = g.scale(enc.logvar, 0.5);
        let sigma = g.exp(half);
        let sigmas: Vec<Vec<f64>> = g.value(sigma).chunks(dz).map(<[f64]>::to_vec).collect();
        let eps = g.constant(vec![n, cfg.noise_len()], noise.concat())?;

        let (zk, transforms, guard_hits) = if cfg.kind.transforms() {
            let spread = g.mul(sigma, eps)?;
            let z = g.add(enc.mu, spread)?;
            self.transform_latents(g, v, enc.c, z)?
        } else {
            let mu = g.concat(&vec![enc.mu; k], 1)?;
            let s = g.concat(&vec![sigma; k], 1)?;
            let spread = g.mul(s, eps)?;
            (g.add(mu, spread)?, vec![vec![identity(dz); k]; n], 0)
        };

        let context = if cfg.kind.attention() {
            let rows = g.reshape(zk, &[n * k, dz])?;
            let mut out = Vec::with_capacity(n);
            for r in 0..n {
                let block = g.slice(rows, 0, r * k, (r + 1) * k)?;
                out.push(self.attend(g, v, block)?);
            }
            let all = g.concat(&out, 0)?;
            g.reshape(all, &[n, k * dz])?
        } else {
            zk
        };

        let mut paths = Vec::with_capacity(k);
        for i in 0..k {
            let zi = g.slice(zk, 1, i * dz, (i + 1) * dz)?;
            let ci = g.slice(context, 1, i * dz, (i + 1) * dz)?;
            let input = g.concat(&[zi, ci, enc.c], 1)?;
            paths.push(self.decode(g, v, i, input)?);
        }
        let s = cfg.waypoints;
        let mut trajectories = vec![Vec::with_capacity(k); n];
        for p in paths {
            for (r, row) in trajectories.iter_mut().enumerate() {
                let one = g.slice(p, 0, r, r + 1)?;
                row.push(g.reshape(one, &[s, 2])?);
            }
        }
        let latents = transforms
            .into_iter()
            .zip(&sigmas)
            .map(|(a, sig)| {
                a.into_iter()
                    .map(|transform| LatentStats {
                        sigma: sig.clone(),
                        transform,
                    })
                    .collect()
            })
            .collect();
        Ok(Tape {
            trajectories,
            mu: enc.mu,
            logvar: enc.logvar,
            latents,
            guard_hits,
        })
    }

    /// Standard-normal draws for one observation, or zeros in mean mode.
    pub fn noise<R: Rng + ?Sized>(&self, mode: Mode, rng: &mut R) -> Vec<f64> {
        let len = self.config.noise_len();
        match mode {
            Mode::Mean => vec![0.0; len],
            Mode::Sample => (0..len).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }

    pub fn forward<R: Rng + ?Sized>(&self, obs: &Observation, mode: Mode, rng: &mut R) -> Result<GeneratedSet> {
        let noise = self.noise(mode, rng);
        self.forward_with_noise(obs, &noise)
    }

    pub fn forward_with_noise(&self, obs: &Observation, noise: &[f64]) -> Result<GeneratedSet> {
        let mut g = Graph::new();
        let v = self.bind(&mut g);
        let tape = self.tape(&mut g, &v, &[obs], &[noise.to_vec()])?;
        let trajectories = tape.trajectories[0]
            .iter()
            .map(|&t| Trajectory::new(g.value(t).chunks(2).map(|p| [p[0], p[1]]).collect()))
            .collect();
        Ok(GeneratedSet {
            trajectories,
            latents: tape.latents.into_iter().next().unwrap_or_default(),
        })
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// Determinant by LU decomposition with partial pivoting.
pub fn determinant(m: &[f64], n: usize) -> f64 {
    let mut a = m.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))
            .expect("non-empty range");
        let p = a[pivot * n + col];
        if p == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            det = -det;
        }
        det *= p;
        for r in col + 1..n {
            let f = a[r * n + col] / p;
            if f != 0.0 {
                for j in col..n {
                    a[r * n + j] -= f * a[col * n + j];
                }
            }
        }
    }
    det
}
