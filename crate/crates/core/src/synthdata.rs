//! Deterministic paired phantoms: T1w-like, FLAIR-like and a contrast-enhanced
//! target that follows a known rule, plus lesion segmentation.
//!
//! Lesions have a hypointense T1w core surrounded by FLAIR-hyperintense
//! edema. Enhancing lesions carry a brighter FLAIR signal than
//! non-enhancing ones, which look identical on T1w; only their core rim
//! brightens on the target.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::volume::nifti::{write_nifti, NiftiDtype};
use crate::volume::vvol::{load_vvol, save_vvol};
use crate::volume::{SegMask, Volume};

pub const LABEL_EDEMA: u32 = 1;
pub const LABEL_CORE: u32 = 2;
pub const LABEL_ENHANCING: u32 = 3;

const BACKGROUND: f64 = -1.0;
const T1W_CORE: f64 = -0.35;
const FLAIR_ENHANCING: f64 = 0.85;
const FLAIR_QUIET: f64 = 0.45;
const EDEMA_MARGIN: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    pub seed: u64,
    /// Inclusive range of lesion counts.
    pub n_lesions: (usize, usize),
    /// Core radius range in voxels.
    pub lesion_radius: (f64, f64),
    pub tissue_noise: f64,
    pub enhancement_gain: f64,
    /// Probability that a lesion enhances.
    pub enhancing_fraction: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            extents: [16; 3],
            seed: 0,
            n_lesions: (1, 3),
            lesion_radius: (1.5, 2.5),
            tissue_noise: 0.01,
            enhancement_gain: 0.6,
            enhancing_fraction: 0.6,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.extents.iter().any(|&e| e < 4 || e % 4 != 0) {
            return bad(format!("phantom extents {:?} must be multiples of 4", self.extents));
        }
        if self.n_lesions.0 > self.n_lesions.1 {
            return bad(format!("lesion count range {:?}", self.n_lesions));
        }
        let (r0, r1) = self.lesion_radius;
        if !(r0 >= 1.0 && r1 >= r0) {
            return bad(format!("lesion radius range {:?}", self.lesion_radius));
        }
        if !(self.tissue_noise >= 0.0) || !(0.0..=1.0).contains(&self.enhancing_fraction) {
            return bad("noise must be >= 0 and enhancing fraction in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cohort {
    #[serde(rename = "GLI")]
    Gli,
    #[serde(rename = "MEN")]
    Men,
    #[serde(rename = "MET")]
    Met,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub index: usize,
    pub cohort: Cohort,
    pub lesions: usize,
    pub t1w: Volume,
    pub flair: Volume,
    pub t1c: Volume,
    pub mask: SegMask,
}

pub fn case_id(index: usize) -> String {
    format!("case-{index:04}")
}

struct Lesion {
    centre: [f64; 3],
    radius: f64,
    enhancing: bool,
}

/// Smooth random field: a few low-frequency cosines.
struct Field {
    waves: Vec<([f64; 3], f64, f64)>,
}

impl Field {
    fn new<R: Rng>(rng: &mut R, amplitude: f64) -> Self {
        let waves = (0..4)
            .map(|_| {
                let k = [0, 1, 2].map(|_| rng.random_range(-1.5..1.5));
                (k, rng.random_range(0.0..std::f64::consts::TAU), amplitude * rng.random_range(0.3..1.0))
            })
            .collect();
        Self { waves }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        self.waves
            .iter()
            .map(|(k, phase, a)| a * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos())
            .sum::<f64>()
            / self.waves.len() as f64
    }
}

/// Global shading of the target along the first axis, in `[0.02, 0.08]`.
pub fn shading(d: usize, depth: usize) -> f64 {
    let u = if depth > 1 { d as f64 / (depth - 1) as f64 } else { 0.5 };
    0.05 + 0.03 * (2.0 * u - 1.0)
}

/// The target rule: `clamp(t1w + shading * brain + gain * rim)`, where brain
/// is every voxel above background on T1w and rim is the enhancing label.
pub fn enhancement_rule(t1w: &Volume, mask: &SegMask, gain: f64) -> Result<Volume> {
    if mask.extents() != t1w.extents() {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs volume {:?}",
            mask.extents(),
            t1w.extents()
        )));
    }
    let [dd, hh, ww] = t1w.extents();
    let mut out = t1w.clone();
    for d in 0..dd {
        let s = shading(d, dd);
        for h in 0..hh {
            for w in 0..ww {
                let i = t1w.index(d, h, w);
                let base = t1w.data()[i];
                let brain = ((base - BACKGROUND) / 0.1).clamp(0.0, 1.0);
                let rim = if mask.labels()[i] == LABEL_ENHANCING { gain } else { 0.0 };
                out.data_mut()[i] = (base + s * brain + rim).clamp(-1.0, 1.0);
            }
        }
    }
    Ok(out.with_intensity_range(-1.0, 1.0))
}

/// Deterministic phantom for `(spec.seed, index)`.
pub fn make_case(spec: &PhantomSpec, index: usize) -> Result<Case> {
    spec.validate()?;
    let mut rng = stream(spec.seed, &[crate::rng::tag("case"), index as u64]);
    let ext = spec.extents;
    let n: usize = ext.iter().product();
    let cohort = [Cohort::Gli, Cohort::Men, Cohort::Met][rng.random_range(0..3)];

    let centre = ext.map(|e| (e as f64 - 1.0) / 2.0 + rng.random_range(-0.5..0.5));
    let radii = ext.map(|e| e as f64 * rng.random_range(0.36..0.44));
    let t1_field = Field::new(&mut rng, 0.25);
    let fl_field = Field::new(&mut rng, 0.2);
    let t1_base = rng.random_range(0.15..0.3);
    let fl_base = rng.random_range(-0.35..-0.2);

    let n_les = rng.random_range(spec.n_lesions.0..=spec.n_lesions.1);
    let lesions: Vec<Lesion> = (0..n_les)
        .map(|_| {
            let dir: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            let reach = rng.random_range(0.0..0.45);
            Lesion {
                centre: [0, 1, 2].map(|a| centre[a] + radii[a] * reach * dir[a] / norm),
                radius: rng.random_range(spec.lesion_radius.0..=spec.lesion_radius.1),
                enhancing: rng.random_bool(spec.enhancing_fraction),
            }
        })
        .collect();

    let mut t1w = vec![BACKGROUND; n];
    let mut flair = vec![BACKGROUND; n];
    let mut core = vec![None::<bool>; n];
    let mut labels = vec![0u32; n];
    let idx = |d: usize, h: usize, w: usize| (d * ext[1] + h) * ext[2] + w;
    for d in 0..ext[0] {
        for h in 0..ext[1] {
            for w in 0..ext[2] {
                let p = [d as f64, h as f64, w as f64];
                let q = [0, 1, 2].map(|a| (p[a] - centre[a]) / radii[a]);
                let r = q.iter().map(|x| x * x).sum::<f64>().sqrt();
                // soft brain boundary about one voxel wide
                let inside = 1.0 / (1.0 + ((r - 1.0) * radii[0] / 0.6).exp());
                let i = idx(d, h, w);
                let t = t1_base + t1_field.at(q);
                let f = fl_base + fl_field.at(q);
                t1w[i] = BACKGROUND + inside * (t - BACKGROUND);
                flair[i] = BACKGROUND + inside * (f - BACKGROUND);
                if inside < 0.5 {
                    continue;
                }
                for les in &lesions {
                    let dist = [0, 1, 2]
                        .map(|a| p[a] - les.centre[a])
                        .iter()
                        .map(|x| x * x)
                        .sum::<f64>()
                        .sqrt();
                    if dist <= les.radius {
                        core[i] = Some(core[i].unwrap_or(false) || les.enhancing);
                    }
                    if dist <= les.radius + EDEMA_MARGIN {
                        let target = if les.enhancing { FLAIR_ENHANCING } else { FLAIR_QUIET };
                        flair[i] = flair[i].max(target);
                        labels[i] = labels[i].max(LABEL_EDEMA);
                    }
                }
                if core[i].is_some() {
                    t1w[i] = T1W_CORE;
                    labels[i] = LABEL_CORE;
                }
            }
        }
    }
    // rim: core voxels of an enhancing lesion with a non-core 6-neighbour
    for d in 0..ext[0] {
        for h in 0..ext[1] {
            for w in 0..ext[2] {
                let i = idx(d, h, w);
                if core[i] != Some(true) {
                    continue;
                }
                let p = [d as isize, h as isize, w as isize];
                let edge = [(0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)].iter().any(|&(a, s)| {
                    let mut q = p;
                    q[a] += s;
                    if q[a] < 0 || q[a] >= ext[a] as isize {
                        return true;
                    }
                    core[idx(q[0] as usize, q[1] as usize, q[2] as usize)].is_none()
                });
                if edge {
                    labels[i] = LABEL_ENHANCING;
                }
            }
        }
    }
    if spec.tissue_noise > 0.0 {
        for (a, b) in t1w.iter_mut().zip(flair.iter_mut()) {
            if *a > BACKGROUND {
                *a += spec.tissue_noise * rng.sample::<f64, _>(StandardNormal);
            }
            if *b > BACKGROUND {
                *b += spec.tissue_noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let clampv = |v: Vec<f64>| -> Result<Volume> {
        Ok(Volume::from_data(ext, v.into_iter().map(|x| x.clamp(-1.0, 1.0)).collect())?.with_intensity_range(-1.0, 1.0))
    };
    let t1w = clampv(t1w)?;
    let flair = clampv(flair)?;
    let mask = SegMask::new(ext, labels)?;
    let t1c = enhancement_rule(&t1w, &mask, spec.enhancement_gain)?;
    Ok(Case {
        id: case_id(index),
        index,
        cohort,
        lesions: n_les,
        t1w,
        flair,
        t1c,
        mask,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::ConfigInvalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Case indices per split after a seeded shuffle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn make_split(seed: u64, n_train: usize, n_val: usize, n_test: usize) -> Result<SplitIndices> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::ConfigInvalid("every split needs at least one case".into()));
    }
    let mut idx: Vec<usize> = (0..n_train + n_val + n_test).collect();
    idx.shuffle(&mut stream(seed, &[crate::rng::tag("split")]));
    let sorted = |v: &[usize]| {
        let mut v = v.to_vec();
        v.sort_unstable();
        v
    };
    Ok(SplitIndices {
        train: sorted(&idx[..n_train]),
        val: sorted(&idx[n_train..n_train + n_val]),
        test: sorted(&idx[n_train + n_val..]),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub index: usize,
    pub cohort: Cohort,
    pub split: Split,
    pub lesions: usize,
    /// Paths relative to the manifest directory.
    pub t1w: PathBuf,
    pub flair: PathBuf,
    pub t1c: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: PhantomSpec,
    pub cases: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// Volumes of one case loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCase {
    pub id: String,
    pub t1w: Volume,
    pub flair: Volume,
    pub t1c: Volume,
    pub mask: SegMask,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(Self::FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::DataMissing(format!("manifest {}", path.display())),
            _ => Error::io(&path, e),
        })?;
        let mut m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(format!("manifest: {e}")))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.cases.iter().filter(|c| c.split == split).collect()
    }

    pub fn load_case(&self, e: &ManifestEntry) -> Result<LoadedCase> {
        let get = |p: &Path| load_vvol(&self.root.join(p));
        Ok(LoadedCase {
            id: e.id.clone(),
            t1w: get(&e.t1w)?,
            flair: get(&e.flair)?,
            t1c: get(&e.t1c)?,
            mask: SegMask::from_volume(&get(&e.mask)?),
        })
    }
}

/// Generates `n_train + n_val + n_test` cases under `dir` with a manifest.
/// With `nifti`, every volume is also written as `.nii`.
pub fn write_dataset(
    spec: &PhantomSpec,
    dir: &Path,
    counts: (usize, usize, usize),
    nifti: bool,
) -> Result<Manifest> {
    spec.validate()?;
    let split = make_split(spec.seed, counts.0, counts.1, counts.2)?;
    let membership = |i: usize| {
        if split.train.binary_search(&i).is_ok() {
            Split::Train
        } else if split.val.binary_search(&i).is_ok() {
            Split::Val
        } else {
            Split::Test
        }
    };
    let total = counts.0 + counts.1 + counts.2;
    let cases_dir = dir.join("cases");
    std::fs::create_dir_all(&cases_dir).map_err(|e| Error::io(&cases_dir, e))?;
    let entries: Vec<Result<ManifestEntry>> = {
        use rayon::prelude::*;
        (0..total)
            .into_par_iter()
            .map(|i| {
                let case = make_case(spec, i)?;
                let rel = |role: &str| PathBuf::from("cases").join(format!("{}_{role}.vvol", case.id));
                let mask_vol = case.mask.to_volume();
                for (role, v) in [("t1w", &case.t1w), ("flair", &case.flair), ("t1c", &case.t1c), ("mask", &mask_vol)] {
                    save_vvol(v, &dir.join(rel(role)))?;
                    if nifti {
                        let p = dir.join("cases").join(format!("{}_{role}.nii", case.id));
                        write_nifti(v, &p, NiftiDtype::F32)?;
                    }
                }
                Ok(ManifestEntry {
                    id: case.id.clone(),
                    index: i,
                    cohort: case.cohort,
                    split: membership(i),
                    lesions: case.lesions,
                    t1w: rel("t1w"),
                    flair: rel("flair"),
                    t1c: rel("t1c"),
                    mask: rel("mask"),
                })
            })
            .collect()
    };
    let cases = entries.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        spec: *spec,
        cases,
        root: dir.to_path_buf(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join(Manifest::FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
