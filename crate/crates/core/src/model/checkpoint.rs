//! Checkpoints: a tensor archive plus a `key=value` manifest next to it.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use super::{Model, ModelConfig, ModelKind};
use crate::error::{Error, Result};
use crate::tensor::{read_archive, write_archive};

const MANIFEST_FORMAT: &str = "mtglab-model 1";

/// `<checkpoint>.manifest`
pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

impl ModelConfig {
    /// One `key=value` per line in a fixed order. Stage flags are derived
    /// from the kind and written out so manifests can be compared directly.
    pub fn to_manifest(&self) -> String {
        let kind = self.kind;
        let lines = [
            ("format", MANIFEST_FORMAT.to_string()),
            ("kind", kind.name().to_string()),
            ("transforms", kind.transforms().to_string()),
            ("attention", kind.attention().to_string()),
            ("shared_decoder", kind.shared_decoder().to_string()),
            ("trajectories", self.trajectories.to_string()),
            ("waypoints", self.waypoints.to_string()),
            ("beams", self.beams.to_string()),
            ("frames", self.frames.to_string()),
            ("velocities", self.velocities.to_string()),
            ("cond_dim", self.cond_dim.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("velocity_dim", self.velocity_dim.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("r_max", self.r_max.to_string()),
            ("transform_gain", self.transform_gain.to_string()),
            ("seed", self.seed.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("model manifest", d);
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line without `=`: {line}")))?;
            map.insert(k.trim(), v.trim());
        }
        let get = |k: &str| map.get(k).copied().ok_or_else(|| bad(format!("missing key {k}")));
        if get("format")? != MANIFEST_FORMAT {
            return Err(bad(format!("unsupported format {}", get("format")?)));
        }
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(format!("{k} is not a count"))) };
        let float = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("{k} is not a number"))) };
        let kind: ModelKind = get("kind")?.parse().map_err(|_| bad(format!("unknown kind {}", get("kind").unwrap_or(""))))?;
        for (k, expect) in [
            ("transforms", kind.transforms()),
            ("attention", kind.attention()),
            ("shared_decoder", kind.shared_decoder()),
        ] {
            if get(k)? != expect.to_string() {
                return Err(bad(format!("{k}={} contradicts kind {kind}", get(k)?)));
            }
        }
        let config = ModelConfig {
            kind,
            trajectories: num("trajectories")?,
            waypoints: num("waypoints")?,
            beams: num("beams")?,
            frames: num("frames")?,
            velocities: num("velocities")?,
            cond_dim: num("cond_dim")?,
            latent_dim: num("latent_dim")?,
            velocity_dim: num("velocity_dim")?,
            hidden_dim: num("hidden_dim")?,
            r_max: float("r_max")?,
            transform_gain: float("transform_gain")?,
            seed: get("seed")?.parse().map_err(|_| bad("seed is not an integer".into()))?,
        };
        config.validate()?;
        Ok(config)
    }
}

impl Model {
    /// Writes the archive to `path` and the manifest to [`manifest_path`].
    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<_> = self.names.iter().cloned().zip(self.params.iter().cloned()).collect();
        write_archive(BufWriter::new(File::create(path)?), &entries)?;
        std::fs::write(manifest_path(path), self.config.to_manifest())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let text = std::fs::read_to_string(manifest_path(path))?;
        let mut model = Model::new(ModelConfig::from_manifest(&text)?)?;
        let entries = read_archive(BufReader::new(File::open(path)?))?;
        model.load_entries(entries)?;
        Ok(model)
    }

    /// Replaces every parameter from `(name, tensor)` pairs; the set of names
    /// and every shape must match exactly.
    pub fn load_entries(&mut self, entries: Vec<(String, crate::tensor::Tensor)>) -> Result<()> {
        if entries.len() != self.names.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} tensors, model has {}", entries.len(), self.names.len()),
            ));
        }
        for (name, t) in entries {
            let i = self
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::format("checkpoint", format!("unexpected tensor {name}")))?;
            if t.shape() != self.params[i].shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("{name} has shape {:?}, expected {:?}", t.shape(), self.params[i].shape()),
                ));
            }
            if !t.is_finite() {
                return Err(Error::format("checkpoint", format!("{name} holds non-finite values")));
            }
            self.params[i] = t.with_grad(true);
        }
        Ok(())
    }
}
