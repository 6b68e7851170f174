use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{LoadedCase, Manifest, ManifestEntry, Split};
use crate::tensor::{Parameters, Tensor};
use crate::vae::{GaussianPosterior, LatentRecord, Role, Vae};

/// Loads every case of `split`, in manifest order.
pub fn load_training_volumes(manifest: &Manifest, split: Split) -> Result<Vec<LoadedCase>> {
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(Error::DataMissing(format!("no {split:?} cases in manifest")));
    }
    entries.par_iter().map(|e| manifest.load_case(e)).collect()
}

/// Posteriors of the three sequences of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseLatents {
    pub id: String,
    pub index: usize,
    pub t1w: GaussianPosterior,
    pub flair: GaussianPosterior,
    pub t1c: GaussianPosterior,
}

impl CaseLatents {
    pub fn get(&self, role: Role) -> &GaussianPosterior {
        match role {
            Role::T1w => &self.t1w,
            Role::Flair => &self.flair,
            Role::T1c => &self.t1c,
        }
    }
}

/// Latents of one split with the scale that brings them to unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSet {
    pub cases: Vec<CaseLatents>,
}

impl LatentSet {
    /// `1 / std` of all posterior means.
    pub fn unit_scale(&self) -> Result<f64> {
        let vals: Vec<f64> = self
            .cases
            .iter()
            .flat_map(|c| Role::ALL.map(|r| c.get(r)))
            .flat_map(|p| p.mu.data().iter().copied())
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(Error::ZeroVariance("cached latents are constant".into()));
        }
        Ok(1.0 / var.sqrt())
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct CacheKey {
    vae_fingerprint: String,
    cases: Vec<String>,
}

/// Order-sensitive hash of every parameter value.
pub(crate) fn fingerprint(params: &Parameters) -> String {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for (name, t) in params.iter() {
        for b in name.bytes().chain(t.data().iter().flat_map(|x| x.to_bits().to_le_bytes())) {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

fn lat_path(dir: &Path, id: &str, role: Role) -> std::path::PathBuf {
    dir.join(format!("{id}_{}.lat", role.as_str()))
}

/// Encodes the cases of `entries` with the autoencoder, reusing `dir` when it
/// already holds latents from the same weights.
pub fn cache_latents(
    vae: &Vae,
    params: &Parameters,
    manifest: &Manifest,
    entries: &[&ManifestEntry],
    dir: &Path,
) -> Result<LatentSet> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let key = CacheKey {
        vae_fingerprint: fingerprint(params),
        cases: entries.iter().map(|e| e.id.clone()).collect(),
    };
    let key_path = dir.join(format!("cache-{}.json", short(&key.cases)));
    let fresh = std::fs::read_to_string(&key_path)
        .ok()
        .and_then(|s| serde_json::from_str::<CacheKey>(&s).ok())
        .is_some_and(|k| k == key);
    let cases = entries
        .par_iter()
        .map(|e| {
            if fresh {
                let load = |r| LatentRecord::load(&lat_path(dir, &e.id, r)).map(|l| l.posterior);
                if let (Ok(t1w), Ok(flair), Ok(t1c)) = (load(Role::T1w), load(Role::Flair), load(Role::T1c)) {
                    return Ok(CaseLatents { id: e.id.clone(), index: e.index, t1w, flair, t1c });
                }
            }
            let case = manifest.load_case(e)?;
            let enc = |role: Role, v| -> Result<GaussianPosterior> {
                let posterior = vae.encode_volume(params, v)?;
                let rec = LatentRecord { case_id: e.id.clone(), role, posterior };
                rec.save(&lat_path(dir, &e.id, role))?;
                Ok(rec.posterior)
            };
            Ok(CaseLatents {
                id: e.id.clone(),
                index: e.index,
                t1w: enc(Role::T1w, &case.t1w)?,
                flair: enc(Role::Flair, &case.flair)?,
                t1c: enc(Role::T1c, &case.t1c)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if !fresh {
        let text = serde_json::to_string(&key).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&key_path, text).map_err(|e| Error::io(&key_path, e))?;
    }
    Ok(LatentSet { cases })
}

fn short(ids: &[String]) -> String {
    let h = ids
        .iter()
        .flat_map(|s| s.bytes().chain([0]))
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    format!("{:08x}", h as u32)
}

/// `scale * mu`, or `scale * (mu + sigma * eps)` when `draw` is given.
pub(crate) fn latent_of(p: &GaussianPosterior, scale: f64, draw: Option<&mut rand_chacha::ChaCha8Rng>) -> Tensor {
    let z = match draw {
        Some(rng) => p.sample(rng),
        None => p.mu.clone(),
    };
    z.map(|x| scale * x)
}
