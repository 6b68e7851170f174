//! Volumetric images, segmentation masks and the geometry helpers used for
//! preprocessing and region-restricted evaluation.

pub mod nifti;
pub mod vvol;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Orientation fields carried through from a NIfTI header untouched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct OrientationMeta {
    pub qform_code: i16,
    pub sform_code: i16,
    /// quatern_b, quatern_c, quatern_d, qoffset_x, qoffset_y, qoffset_z
    pub quatern: [f32; 6],
    pub srow: [[f32; 4]; 3],
}

/// Scalar 3D grid, row-major over (D, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
    intensity_range: (f64, f64),
    pub orientation: Option<OrientationMeta>,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidSpacing(spacing));
        }
        let n: usize = extents.iter().product();
        if n != data.len() {
            return Err(shape_err(format!(
                "volume {extents:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        let intensity_range = min_max(&data);
        Ok(Self {
            extents,
            spacing,
            data,
            intensity_range,
            orientation: None,
        })
    }

    /// Isotropic 1 mm volume.
    pub fn from_data(extents: [usize; 3], data: Vec<f64>) -> Result<Self> {
        Self::new(extents, [1.0; 3], data)
    }

    pub fn filled(extents: [usize; 3], value: f64) -> Self {
        Self::from_data(extents, vec![value; extents.iter().product()]).expect("consistent")
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Declared intensity range (lo, hi).
    pub fn intensity_range(&self) -> (f64, f64) {
        self.intensity_range
    }

    pub fn with_intensity_range(mut self, lo: f64, hi: f64) -> Self {
        self.intensity_range = (lo, hi);
        self
    }

    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.extents[1] + h) * self.extents[2] + w
    }

    pub fn at(&self, d: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(d, h, w)]
    }

    pub fn same_extents(&self, other: &Volume) -> Result<()> {
        if self.extents != other.extents {
            return Err(shape_err(format!(
                "volume extents {:?} vs {:?}",
                self.extents, other.extents
            )));
        }
        Ok(())
    }

    /// `[1, 1, D, H, W]` tensor view for the networks.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.extents;
        Tensor::new([1, 1, d, h, w], self.data.clone()).expect("consistent")
    }

    /// Inverse of [`Volume::to_tensor`] for a single-channel, single-sample
    /// tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [1, 1, d, h, w] => Self::from_data([*d, *h, *w], t.data().to_vec()),
            other => Err(shape_err(format!("expected [1,1,D,H,W], got {other:?}"))),
        }
    }
}

fn min_max(data: &[f64]) -> (f64, f64) {
    data.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Integer label grid (0 = background).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    extents: [usize; 3],
    labels: Vec<u32>,
}

impl SegMask {
    pub fn new(extents: [usize; 3], labels: Vec<u32>) -> Result<Self> {
        if extents.iter().product::<usize>() != labels.len() {
            return Err(shape_err(format!(
                "mask {extents:?} with {} labels",
                labels.len()
            )));
        }
        Ok(Self { extents, labels })
    }

    pub fn empty(extents: [usize; 3]) -> Self {
        Self {
            extents,
            labels: vec![0; extents.iter().product()],
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn to_volume(&self) -> Volume {
        Volume::from_data(self.extents, self.labels.iter().map(|&l| l as f64).collect())
            .expect("consistent")
    }

    /// Rounds a label-valued volume back to a mask; negative values clamp to 0.
    pub fn from_volume(v: &Volume) -> Self {
        Self {
            extents: v.extents(),
            labels: v.data().iter().map(|&x| x.round().max(0.0) as u32).collect(),
        }
    }
}

/// Inclusive voxel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox {
    pub fn full(extents: [usize; 3]) -> Self {
        Self {
            min: [0; 3],
            max: [extents[0] - 1, extents[1] - 1, extents[2] - 1],
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.max[a] - self.min[a] + 1)
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }
}

/// Affine map of `[min, max]` onto `[-1, 1]`; constant volumes become zeros.
pub fn normalize_unit(v: &Volume) -> Volume {
    let (lo, hi) = min_max(&v.data);
    let data = if hi > lo {
        let scale = 2.0 / (hi - lo);
        v.data
            .iter()
            .map(|&x| ((x - lo) * scale - 1.0).clamp(-1.0, 1.0))
            .collect()
    } else {
        vec![0.0; v.data.len()]
    };
    Volume {
        extents: v.extents,
        spacing: v.spacing,
        data,
        intensity_range: (-1.0, 1.0),
        orientation: v.orientation,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Nearest,
    Trilinear,
}

/// Resamples onto a grid with `new_spacing`, aligning voxel centres and
/// clamping out-of-range samples to the edge.
pub fn resample(v: &Volume, new_spacing: [f64; 3], mode: Interp) -> Result<Volume> {
    if new_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidSpacing(new_spacing));
    }
    if new_spacing == v.spacing {
        return Ok(v.clone());
    }
    let old = v.extents;
    let ext: [usize; 3] = std::array::from_fn(|a| {
        ((old[a] as f64 * v.spacing[a] / new_spacing[a]).round() as usize).max(1)
    });
    // continuous source index for each destination index along each axis
    let coords: Vec<Vec<f64>> = (0..3)
        .map(|a| {
            (0..ext[a])
                .map(|i| {
                    let p = (i as f64 + 0.5) * new_spacing[a] / v.spacing[a] - 0.5;
                    p.clamp(0.0, (old[a] - 1) as f64)
                })
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(ext.iter().product());
    for &zd in &coords[0] {
        for &zh in &coords[1] {
            for &zw in &coords[2] {
                data.push(match mode {
                    Interp::Nearest => {
                        v.at(zd.round() as usize, zh.round() as usize, zw.round() as usize)
                    }
                    Interp::Trilinear => trilinear(v, [zd, zh, zw]),
                });
            }
        }
    }
    let mut out = Volume::new(ext, new_spacing, data)?;
    out.intensity_range = v.intensity_range;
    out.orientation = v.orientation;
    Ok(out)
}

fn trilinear(v: &Volume, p: [f64; 3]) -> f64 {
    let ext = v.extents;
    let lo: [usize; 3] = std::array::from_fn(|a| p[a].floor() as usize);
    let hi: [usize; 3] = std::array::from_fn(|a| (lo[a] + 1).min(ext[a] - 1));
    let f: [f64; 3] = std::array::from_fn(|a| p[a] - lo[a] as f64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let pick = |a: usize| corner >> (2 - a) & 1 == 1;
        let mut wgt = 1.0;
        let mut idx = [0; 3];
        for a in 0..3 {
            if pick(a) {
                wgt *= f[a];
                idx[a] = hi[a];
            } else {
                wgt *= 1.0 - f[a];
                idx[a] = lo[a];
            }
        }
        if wgt != 0.0 {
            acc += wgt * v.at(idx[0], idx[1], idx[2]);
        }
    }
    acc
}

/// Tight box around every nonzero label, grown by `pad` voxels per side and
/// clipped to `extents` independently per axis.
pub fn tumor_bbox(m: &SegMask, pad: usize, extents: [usize; 3]) -> Result<BoundingBox> {
    let [_, mh, mw] = m.extents;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, _) in m.labels.iter().enumerate().filter(|(_, &l)| l != 0) {
        let p = [i / (mh * mw), (i / mw) % mh, i % mw];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
        any = true;
    }
    if !any {
        return Err(Error::NoForeground);
    }
    Ok(BoundingBox {
        min: std::array::from_fn(|a| lo[a].saturating_sub(pad)),
        max: std::array::from_fn(|a| (hi[a] + pad).min(extents[a] - 1)),
    })
}

/// Copies the inclusive sub-volume `b`.
pub fn crop(v: &Volume, b: &BoundingBox) -> Result<Volume> {
    if (0..3).any(|a| b.min[a] > b.max[a] || b.max[a] >= v.extents[a]) {
        return Err(Error::OutOfBounds(format!(
            "box {:?}..={:?} in volume {:?}",
            b.min, b.max, v.extents
        )));
    }
    let ext = b.extents();
    let mut data = Vec::with_capacity(ext.iter().product());
    for d in b.min[0]..=b.max[0] {
        for h in b.min[1]..=b.max[1] {
            let start = v.index(d, h, b.min[2]);
            data.extend_from_slice(&v.data[start..start + ext[2]]);
        }
    }
    let mut out = Volume::new(ext, v.spacing, data)?;
    out.intensity_range = v.intensity_range;
    Ok(out)
}
