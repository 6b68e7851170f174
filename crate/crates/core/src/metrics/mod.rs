//! Image-fidelity metrics over volumes: NMSE, PSNR, NCC and Gaussian-window
//! 3D SSIM, plus Welch's t-test and report assembly.

mod report;
mod stats;

pub use report::{
    evaluate_case, Aggregate, CaseRecord, MetricKind, MetricReport, Region, TTestRecord, TUMOR_PAD,
};
pub use stats::{ln_gamma, regularized_incomplete_beta, student_t_two_sided_p, welch_t, WelchResult};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Significance threshold for the two-sided Welch test.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Dynamic range of volumes normalized to [-1, 1].
pub const DEFAULT_DYNAMIC_RANGE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub dynamic_range: f64,
    pub c1: f64,
    pub c2: f64,
    pub window_radius: usize,
    pub window_sigma: f64,
}

impl SsimConfig {
    /// Stabilizers `c1 = (0.01 L)^2`, `c2 = (0.03 L)^2` with a radius-3,
    /// sigma-1.5 Gaussian window.
    pub fn with_range(dynamic_range: f64) -> Self {
        Self {
            dynamic_range,
            c1: (0.01 * dynamic_range).powi(2),
            c2: (0.03 * dynamic_range).powi(2),
            window_radius: 3,
            window_sigma: 1.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dynamic_range > 0.0) || self.window_radius < 1 || !(self.window_sigma > 0.0) {
            return Err(Error::ConfigInvalid(format!("bad SSIM config {self:?}")));
        }
        Ok(())
    }

    pub fn window_diameter(&self) -> usize {
        2 * self.window_radius + 1
    }

    /// Normalized 1D Gaussian taps; the 3D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let r = self.window_radius as isize;
        let raw: Vec<f64> = (-r..=r)
            .map(|i| (-((i * i) as f64) / (2.0 * self.window_sigma * self.window_sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / s).collect()
    }
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self::with_range(DEFAULT_DYNAMIC_RANGE)
    }
}

/// `sum (x - ref)^2 / sum ref^2`.
pub fn nmse(x: &Volume, reference: &Volume) -> Result<f64> {
    x.same_extents(reference)?;
    let energy: f64 = reference.data().iter().map(|r| r * r).sum();
    if energy == 0.0 {
        return Err(Error::ZeroReference);
    }
    let resid: f64 = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(resid / energy)
}

pub fn mse(x: &Volume, reference: &Volume) -> Result<f64> {
    x.same_extents(reference)?;
    let n = x.len().max(1) as f64;
    Ok(x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `10 log10(L^2 / MSE)` in dB; identical inputs give `+inf`.
pub fn psnr(x: &Volume, reference: &Volume, dynamic_range: f64) -> Result<f64> {
    if !(dynamic_range > 0.0) {
        return Err(Error::ConfigInvalid(format!(
            "PSNR dynamic range must be positive, got {dynamic_range}"
        )));
    }
    let m = mse(x, reference)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (dynamic_range * dynamic_range / m).log10())
}

/// Pearson correlation over voxels.
pub fn ncc(x: &Volume, reference: &Volume) -> Result<f64> {
    x.same_extents(reference)?;
    let n = x.len() as f64;
    let mx = x.data().iter().sum::<f64>() / n;
    let mr = reference.data().iter().sum::<f64>() / n;
    let (mut sxr, mut sxx, mut srr) = (0.0, 0.0, 0.0);
    for (a, b) in x.data().iter().zip(reference.data()) {
        let (da, db) = (a - mx, b - mr);
        sxr += da * db;
        sxx += da * da;
        srr += db * db;
    }
    if sxx == 0.0 || srr == 0.0 {
        return Err(Error::ZeroVariance("NCC needs non-constant volumes".into()));
    }
    Ok(sxr / (sxx.sqrt() * srr.sqrt()))
}

/// Separable "valid" filtering of a (D, H, W) grid with the same taps on
/// every axis.
fn filter_valid(data: &[f64], ext: [usize; 3], taps: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let k = taps.len();
    let mut cur = data.to_vec();
    let mut dims = ext;
    for axis in 0..3 {
        let mut out_dims = dims;
        out_dims[axis] = dims[axis] + 1 - k;
        let stride = match axis {
            0 => dims[1] * dims[2],
            1 => dims[2],
            _ => 1,
        };
        let mut out = Vec::with_capacity(out_dims.iter().product());
        for d in 0..out_dims[0] {
            for h in 0..out_dims[1] {
                for w in 0..out_dims[2] {
                    let base = (d * dims[1] + h) * dims[2] + w;
                    out.push(taps.iter().enumerate().map(|(i, t)| t * cur[base + i * stride]).sum());
                }
            }
        }
        cur = out;
        dims = out_dims;
    }
    (cur, dims)
}

/// Mean SSIM over every voxel whose full window lies inside the volume.
pub fn ssim3d(x: &Volume, reference: &Volume, cfg: &SsimConfig) -> Result<f64> {
    cfg.validate()?;
    x.same_extents(reference)?;
    let ext = x.extents();
    let diam = cfg.window_diameter();
    if ext.iter().any(|&e| e < diam) {
        return Err(Error::TooSmall(format!(
            "volume {ext:?} is smaller than the {diam}-voxel SSIM window"
        )));
    }
    let taps = cfg.taps();
    let xx: Vec<f64> = x.data().iter().map(|a| a * a).collect();
    let rr: Vec<f64> = reference.data().iter().map(|a| a * a).collect();
    let xr: Vec<f64> = x.data().iter().zip(reference.data()).map(|(a, b)| a * b).collect();
    let (mu_x, _) = filter_valid(x.data(), ext, &taps);
    let (mu_r, _) = filter_valid(reference.data(), ext, &taps);
    let (e_xx, _) = filter_valid(&xx, ext, &taps);
    let (e_rr, _) = filter_valid(&rr, ext, &taps);
    let (e_xr, _) = filter_valid(&xr, ext, &taps);
    let n = mu_x.len() as f64;
    let total: f64 = (0..mu_x.len())
        .map(|i| ssim_local(mu_x[i], mu_r[i], e_xx[i], e_rr[i], e_xr[i], cfg.c1, cfg.c2))
        .sum();
    Ok(total / n)
}

/// SSIM from local first and second moments.
pub fn ssim_local(mx: f64, mr: f64, exx: f64, err: f64, exr: f64, c1: f64, c2: f64) -> f64 {
    let vx = exx - mx * mx;
    let vr = err - mr * mr;
    let cov = exr - mx * mr;
    ((2.0 * mx * mr + c1) * (2.0 * cov + c2)) / ((mx * mx + mr * mr + c1) * (vx + vr + c2))
}
