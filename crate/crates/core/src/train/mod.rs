//! Optimizer, run configuration, checkpoints and the training loops.
//!
//! A run writes into `out_dir`:
//!
//! ```text
//! loss.csv            step,epoch,loss,wall_ms
//! val.csv             step,loss (when val_every > 0)
//! ckpt/step-NNNNNN.*  periodic checkpoints
//! final.ckpt          last step
//! ```
//!
//! Every checkpoint `X.ckpt` has a sibling `X.json` describing the model.
//! Batches, latent draws and loss noise are keyed by `(seed, step)` or
//! `(seed, epoch, case)`, so a resumed run replays the same trajectory.

mod adamw;
mod data;
mod loops;

pub use adamw::{AdamW, AdamWConfig};
pub use data::{cache_latents, load_training_volumes, CaseLatents, LatentSet};
pub use loops::{load_vae, train_ddpm, train_rflow, train_vae, TrainOutcome};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedulers::SchedulerConfig;
use crate::tensor::{checkpoint, Parameters, Tensor};
use crate::vae::VaeConfig;
use crate::velocity_net::UNetConfig;

/// How cached posteriors become training latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    Mean,
    /// A fresh reparameterized draw per epoch and case.
    #[default]
    Sample,
}

/// Learning-rate curve over the run's optimizer steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half cosine from `lr` down to `lr / 100` at the last step.
    Cosine,
}

impl LrSchedule {
    pub fn at(self, lr: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => {
                let floor = lr / 100.0;
                let u = step as f64 / total.saturating_sub(1).max(1) as f64;
                floor + 0.5 * (lr - floor) * (1.0 + (std::f64::consts::PI * u.min(1.0)).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub lr_schedule: LrSchedule,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    /// Save a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Validation loss cadence in steps; 0 disables it.
    pub val_every: usize,
    pub vae: VaeConfig,
    pub unet: UNetConfig,
    pub scheduler: SchedulerConfig,
    /// Trained autoencoder for the diffusion runs.
    pub vae_checkpoint: Option<PathBuf>,
    /// Where encoded latents are cached; defaults to `out_dir/latents`.
    pub latent_cache: Option<PathBuf>,
    pub latents: LatentMode,
    /// Per-item probability of zeroing each conditioning stream.
    pub cond_dropout: f64,
    pub resume: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let vae = VaeConfig::default();
        Self {
            seed: 0,
            epochs: 1,
            max_steps: None,
            batch_size: 4,
            optimizer: AdamWConfig::default(),
            lr_schedule: LrSchedule::Constant,
            manifest: PathBuf::from("data/manifest.json"),
            out_dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
            val_every: 0,
            unet: UNetConfig::desk(vae.latent_channels),
            vae,
            scheduler: SchedulerConfig::default(),
            vae_checkpoint: None,
            latent_cache: None,
            latents: LatentMode::Sample,
            cond_dropout: 0.0,
            resume: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.into()));
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be >= 1");
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return bad("cond_dropout must lie in [0, 1)");
        }
        self.optimizer.validate()?;
        self.vae.validate()?;
        self.unet.validate()?;
        self.scheduler.validate()
    }

    /// Parses TOML (or JSON for a `.json` path). Relative paths inside are
    /// taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::DataMissing(format!("config {}", path.display())),
            _ => Error::io(path, e),
        })?;
        let mut cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| Error::ConfigInvalid(e.to_string()))?
        };
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.manifest);
        fix(&mut self.out_dir);
        for p in [&mut self.vae_checkpoint, &mut self.latent_cache, &mut self.resume]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Steps per epoch and total steps for `items` training items.
    pub fn schedule(&self, items: usize) -> (usize, usize) {
        let per_epoch = (items / self.batch_size).max(1);
        let total = per_epoch * self.epochs;
        (per_epoch, self.max_steps.map_or(total, |m| m.min(total)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vae,
    Rflow,
    Ddpm,
}

/// Sidecar description stored next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub kind: ModelKind,
    pub vae: VaeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unet: Option<UNetConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheduler: Option<SchedulerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vae_checkpoint: Option<PathBuf>,
    pub seed: u64,
}

/// Parameters plus optional optimizer state and latent scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub card: ModelCard,
    pub params: Parameters,
    pub step: u64,
    pub optimizer: Option<AdamW>,
    pub latent_scale: Option<f64>,
}

const PARAM: &str = "param.";
const META_STEP: &str = "meta.step";
const META_SCALE: &str = "meta.latent_scale";

pub fn card_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (format!("{PARAM}{n}"), strip(t)))
            .collect();
        tensors.push((META_STEP.into(), Tensor::scalar(self.step as f64)));
        if let Some(s) = self.latent_scale {
            tensors.push((META_SCALE.into(), Tensor::scalar(s)));
        }
        if let Some(opt) = &self.optimizer {
            tensors.extend(opt.export(&self.params)?);
        }
        checkpoint::save(path, tensors.iter().map(|(n, t)| (n.as_str(), t)))?;
        let card = card_path(path);
        let text = serde_json::to_string_pretty(&self.card).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&card, text).map_err(|e| Error::io(&card, e))
    }

    /// Loads a checkpoint; optimizer state is restored with `optim`.
    pub fn load(path: &Path, optim: Option<AdamWConfig>) -> Result<Self> {
        let cp = card_path(path);
        let text = std::fs::read_to_string(&cp).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::DataMissing(format!("model card {}", cp.display())),
            _ => Error::io(&cp, e),
        })?;
        let card: ModelCard =
            serde_json::from_str(&text).map_err(|e| Error::CheckpointMismatch(format!("model card: {e}")))?;
        let tensors = checkpoint::load(path)?;
        let params = Parameters::from_map(
            tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(PARAM).map(|n| (n.to_string(), v.clone())))
                .collect::<BTreeMap<_, _>>(),
        );
        let scalar = |k: &str| tensors.get(k).and_then(Tensor::item);
        let step = scalar(META_STEP).unwrap_or(0.0) as u64;
        let optimizer = match optim {
            Some(c) if tensors.keys().any(|k| k.starts_with("adam.")) => {
                Some(AdamW::import(c, step, &params, &tensors)?)
            }
            _ => None,
        };
        Ok(Self {
            card,
            params,
            step,
            optimizer,
            latent_scale: scalar(META_SCALE),
        })
    }

    /// Fails unless the stored parameters match `expected` in names and shapes.
    pub fn expect_params(&self, expected: &Parameters) -> Result<()> {
        expected.check_compatible(&self.params)
    }
}

fn strip(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("shape already valid")
}

/// One row of `loss.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValRow {
    pub step: usize,
    pub loss: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            Error::DataMissing(path.display().to_string())
        }
        _ => Error::Format(format!("{}: {e}", path.display())),
    })?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}
