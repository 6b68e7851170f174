//! Inference and evaluation built on trained checkpoints: conditional
//! sampling per case, ablations, metric reports and step-count timing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate_case, MetricReport, SsimConfig};
use crate::rng::{stream, tag};
use crate::schedulers::{ddpm_sample, rf_sample, DdpmSchedule, SchedulerConfig};
use crate::synthdata::{Manifest, ManifestEntry, Split};
use crate::tensor::{Parameters, Tensor};
use crate::train::{Checkpoint, ModelKind};
use crate::vae::Vae;
use crate::velocity_net::{assemble_input, ConditioningLatents, UNet};
use crate::volume::vvol::{load_vvol, save_vvol};
use crate::volume::Volume;

/// Which conditioning streams reach the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Both,
    T1wOnly,
    FlairOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Both, Ablation::T1wOnly, Ablation::FlairOnly];

    /// `(mask_t1w, mask_flair)`.
    pub fn masks(self) -> (bool, bool) {
        match self {
            Ablation::Both => (false, false),
            Ablation::T1wOnly => (false, true),
            Ablation::FlairOnly => (true, false),
        }
    }

    pub fn from_masks(mask_t1w: bool, mask_flair: bool) -> Result<Self> {
        match (mask_t1w, mask_flair) {
            (false, false) => Ok(Ablation::Both),
            (false, true) => Ok(Ablation::T1wOnly),
            (true, false) => Ok(Ablation::FlairOnly),
            (true, true) => Err(Error::ConfigInvalid("masking both inputs leaves nothing to condition on".into())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Both => "both",
            Ablation::T1wOnly => "t1w_only",
            Ablation::FlairOnly => "flair_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub seed: u64,
    /// Euler steps for rflow; ignored by DDPM, which walks its full chain.
    pub steps: Option<usize>,
    pub ablation: Ablation,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { seed: 0, steps: None, ablation: Ablation::Both }
    }
}

/// Trained autoencoder plus latent network, ready for inference.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    pub kind: ModelKind,
    pub vae: Vae,
    pub vae_params: Parameters,
    pub unet: UNet,
    pub params: Parameters,
    pub scheduler: SchedulerConfig,
    pub latent_scale: f64,
}

impl Synthesizer {
    /// Loads a latent-network checkpoint and the autoencoder its card names
    /// (or `vae_override`).
    pub fn load(ckpt: &Path, vae_override: Option<&Path>) -> Result<Self> {
        let ck = Checkpoint::load(ckpt, None)?;
        if ck.card.kind == ModelKind::Vae {
            return Err(Error::CheckpointMismatch(format!("{} holds an autoencoder", ckpt.display())));
        }
        let mismatch = |what: &str| Error::CheckpointMismatch(format!("{}: model card lacks {what}", ckpt.display()));
        let unet = UNet::new(ck.card.unet.clone().ok_or_else(|| mismatch("network config"))?)?;
        let scheduler = ck.card.scheduler.ok_or_else(|| mismatch("scheduler"))?;
        let latent_scale = ck.latent_scale.ok_or_else(|| mismatch("latent scale"))?;
        ck.expect_params(&unet.init_params(&mut stream(0, &[]))?)?;
        let vae_path = vae_override
            .map(Path::to_path_buf)
            .or(ck.card.vae_checkpoint.clone())
            .ok_or_else(|| mismatch("autoencoder path"))?;
        let (vae, vck) = crate::train::load_vae(&vae_path)?;
        if vae.config != ck.card.vae {
            return Err(Error::CheckpointMismatch("autoencoder config differs from the one used in training".into()));
        }
        Ok(Self {
            kind: ck.card.kind,
            vae,
            vae_params: vck.params,
            unet,
            params: ck.params,
            scheduler,
            latent_scale,
        })
    }

    /// Scaled posterior means of the two inputs.
    pub fn condition(&self, t1w: &Volume, flair: &Volume) -> Result<ConditioningLatents> {
        let enc = |v: &Volume| -> Result<Tensor> {
            Ok(self.vae.encode_volume(&self.vae_params, v)?.mu.map(|x| self.latent_scale * x))
        };
        ConditioningLatents::new(enc(t1w)?, enc(flair)?)
    }

    /// Runs the sampler from `z_init`; returns the latent and the NFE.
    pub fn denoise(
        &self,
        cond: &ConditioningLatents,
        z_init: &Tensor,
        opts: &SampleOptions,
        case_index: usize,
    ) -> Result<(Tensor, usize)> {
        let net = |z: &Tensor, t: f64| self.unet.predict(&self.params, &assemble_input(z, cond)?, t);
        match (self.kind, self.scheduler) {
            (ModelKind::Rflow, SchedulerConfig::Rflow(s)) => rf_sample(&net, z_init, opts.steps.unwrap_or(s.steps)),
            (ModelKind::Ddpm, SchedulerConfig::Ddpm { train_timesteps, beta_start, beta_end }) => {
                let sched = DdpmSchedule::linear(train_timesteps, beta_start, beta_end)?;
                let mut rng = stream(opts.seed, &[tag("ddpm-noise"), case_index as u64]);
                ddpm_sample(&net, z_init, &sched, &mut rng)
            }
            (k, s) => Err(Error::CheckpointMismatch(format!("{k:?} model with a {} scheduler", s.name()))),
        }
    }

    /// Starting noise for one case; shared by every sampler and ablation.
    pub fn initial_noise(&self, like: &Tensor, seed: u64, case_index: usize) -> Tensor {
        Tensor::randn(like.shape().to_vec(), 1.0, &mut stream(seed, &[tag("sample"), case_index as u64]))
    }

    /// Full synthesis of one case: encode, sample, decode, clamp to `[-1, 1]`.
    pub fn synthesize(&self, t1w: &Volume, flair: &Volume, case_index: usize, opts: &SampleOptions) -> Result<Volume> {
        let (mt, mf) = opts.ablation.masks();
        let cond = self.condition(t1w, flair)?.masked(mt, mf);
        let z_init = self.initial_noise(&cond.t1w, opts.seed, case_index);
        let (z, _) = self.denoise(&cond, &z_init, opts, case_index)?;
        let decoded = self.vae.decode(&self.vae_params, &z.map(|x| x / self.latent_scale))?;
        let v = Volume::from_tensor(&decoded)?;
        let data = v.data().iter().map(|x| x.clamp(-1.0, 1.0)).collect();
        Ok(Volume::new(t1w.extents(), t1w.spacing(), data)?.with_intensity_range(-1.0, 1.0))
    }
}

pub fn prediction_path(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(format!("{case_id}_t1c.vvol"))
}

/// Synthesizes every case of `split` into `out_dir`, one file per case.
pub fn sample_split(
    synth: &Synthesizer,
    manifest: &Manifest,
    split: Split,
    opts: &SampleOptions,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(Error::DataMissing(format!("no {split:?} cases in manifest")));
    }
    entries
        .par_iter()
        .map(|e| {
            let case = manifest.load_case(e)?;
            let pred = synth.synthesize(&case.t1w, &case.flair, e.index, opts)?;
            let path = prediction_path(out_dir, &e.id);
            save_vvol(&pred, &path)?;
            Ok(path)
        })
        .collect()
}

/// Scores the predictions in `pred_dir` against the manifest targets.
pub fn evaluate_dir(
    pred_dir: &Path,
    manifest: &Manifest,
    split: Split,
    with_masks: bool,
    label: &str,
) -> Result<MetricReport> {
    let cfg = SsimConfig::default();
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(Error::DataMissing(format!("no {split:?} cases in manifest")));
    }
    let records = entries
        .par_iter()
        .map(|e: &&ManifestEntry| {
            let pred = match load_vvol(&prediction_path(pred_dir, &e.id)) {
                Err(Error::DataMissing(_)) => return Err(Error::MissingPrediction(e.id.clone())),
                other => other?,
            };
            let case = manifest.load_case(e)?;
            evaluate_case(&e.id, &pred, &case.t1c, with_masks.then_some(&case.mask), &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::new(label, records.into_iter().flatten().collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Encode,
    Denoise,
    Decode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub stage: Stage,
    pub sampler: String,
    pub steps: usize,
    pub wall_seconds: f64,
    /// Network evaluations; zero for the autoencoder stages.
    pub nfe: usize,
}

/// Projected cost of a patch-based image-space DDPM: every patch walks the
/// full chain, and each evaluation touches `voxel_ratio` times the voxels
/// of one latent evaluation. Not an implemented sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchCostModel {
    pub patches: usize,
    pub steps: usize,
    pub voxel_ratio: f64,
    pub latent_seconds_per_nfe: f64,
    pub projected_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub results: Vec<BenchResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_ddpm: Option<PatchCostModel>,
}

impl BenchReport {
    pub fn find(&self, stage: Stage, sampler: &str, steps: usize) -> Option<&BenchResult> {
        self.results
            .iter()
            .find(|r| r.stage == stage && r.sampler == sampler && r.steps == steps)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.results {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
            .map_err(|e| Error::Format(e.to_string()))
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times encode, denoise and decode for each `(sampler, steps)` pair on one
/// network, taking the median of `repeats` runs. `steps` is ignored for
/// DDPM, which always runs its `T`-step chain. NFE counts are checked.
pub fn bench(
    vae: &Vae,
    vae_params: &Parameters,
    unet: &UNet,
    params: &Parameters,
    extents: [usize; 3],
    runs: &[(ModelKind, usize)],
    ddpm: &DdpmSchedule,
    repeats: usize,
) -> Result<BenchReport> {
    let repeats = repeats.max(1);
    let mut rng = stream(0, &[tag("bench")]);
    let volume = Volume::from_data(extents, Tensor::randn(extents.to_vec(), 0.3, &mut rng).into_data())?;
    let mut results = Vec::new();
    let mut ddpm_per_nfe = None;
    for &(kind, steps) in runs {
        let (name, expected) = match kind {
            ModelKind::Rflow => ("rflow", steps),
            ModelKind::Ddpm => ("ddpm", ddpm.len()),
            ModelKind::Vae => return Err(Error::ConfigInvalid("bench samples with rflow or ddpm".into())),
        };
        let (mut enc, mut den, mut dec) = (Vec::new(), Vec::new(), Vec::new());
        for r in 0..repeats {
            let clock = Instant::now();
            let a = vae.encode_volume(vae_params, &volume)?.mu;
            let b = vae.encode_volume(vae_params, &volume)?.mu;
            enc.push(clock.elapsed().as_secs_f64());
            let cond = ConditioningLatents::new(a, b)?;
            let z = Tensor::randn(cond.t1w.shape().to_vec(), 1.0, &mut stream(r as u64, &[tag("bench-z")]));
            let net = |z: &Tensor, t: f64| unet.predict(params, &assemble_input(z, &cond)?, t);
            let clock = Instant::now();
            let (out, nfe) = match kind {
                ModelKind::Rflow => rf_sample(&net, &z, steps)?,
                _ => ddpm_sample(&net, &z, ddpm, &mut stream(r as u64, &[tag("bench-noise")]))?,
            };
            den.push(clock.elapsed().as_secs_f64());
            if nfe != expected {
                return Err(Error::Format(format!("{name}: {nfe} evaluations, expected {expected}")));
            }
            let clock = Instant::now();
            vae.decode(vae_params, &out)?;
            dec.push(clock.elapsed().as_secs_f64());
        }
        let den_med = median(den);
        if kind == ModelKind::Ddpm {
            ddpm_per_nfe = Some(den_med / expected as f64);
        }
        for (stage, t, nfe) in [(Stage::Encode, median(enc), 0), (Stage::Denoise, den_med, expected), (Stage::Decode, median(dec), 0)] {
            results.push(BenchResult { stage, sampler: name.into(), steps: expected, wall_seconds: t.max(f64::MIN_POSITIVE), nfe });
        }
    }
    let patch_ddpm = ddpm_per_nfe.map(|per| {
        let voxel_ratio = (crate::vae::COMPRESSION as f64).powi(3);
        let patches = 8;
        PatchCostModel {
            patches,
            steps: ddpm.len(),
            voxel_ratio,
            latent_seconds_per_nfe: per,
            projected_seconds: per * voxel_ratio * ddpm.len() as f64 * patches as f64,
        }
    });
    Ok(BenchReport { results, patch_ddpm })
}

/// Mean PSNR of `decode(encode(x).mu)` over every volume of `split`.
pub fn reconstruction_psnr(vae: &Vae, params: &Parameters, manifest: &Manifest, split: Split) -> Result<f64> {
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(Error::DataMissing(format!("no {split:?} cases in manifest")));
    }
    let per_case = entries
        .par_iter()
        .map(|e| {
            let case = manifest.load_case(e)?;
            [&case.t1w, &case.flair, &case.t1c]
                .into_iter()
                .map(|v| {
                    let z = vae.encode_volume(params, v)?.mu;
                    let r = vae.decode_volume(params, &z)?;
                    crate::metrics::psnr(&r, v, crate::metrics::DEFAULT_DYNAMIC_RANGE)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<f64> = per_case.into_iter().flatten().collect();
    Ok(all.iter().sum::<f64>() / all.len() as f64)
}
