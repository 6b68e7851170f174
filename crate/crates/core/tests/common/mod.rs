//! Shared oracles for the integration and acceptance tests.
#![allow(dead_code)]

use latflow::rng::stream;
use latflow::tensor::{grad_check, ops, BoundParams, GradCheckReport, Parameters, Tape, Tensor, Var};
use latflow::volume::Volume;
use latflow::Result;

pub const GRAD_H: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-4;

type Probe = Box<dyn Fn(&Tape, &BoundParams) -> Result<Var>>;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut stream(seed, &[]))
}

/// Contracts `y` with fixed random weights so every output element matters.
fn contract(t: &Tape, y: Var, seed: u64) -> Result<Var> {
    let w = t.constant(randn(&y.shape(), seed ^ 0x5eed));
    Ok(ops::sum(&ops::mul(&y, &w)?))
}

fn params(entries: &[(&str, &[usize])], seed: u64) -> Parameters {
    let mut p = Parameters::new();
    for (k, (name, shape)) in entries.iter().enumerate() {
        p.insert(*name, randn(shape, seed + k as u64)).unwrap();
    }
    p
}

/// One finite-difference check per tape primitive.
pub fn primitive_checks(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let s = seed;
    let cases: Vec<(&'static str, Parameters, Probe)> = vec![
        ("add", params(&[("a", &[3, 4]), ("b", &[3, 4])], s), Box::new(move |t, p| contract(t, ops::add(p.get("a")?, p.get("b")?)?, s))),
        ("sub", params(&[("a", &[3, 4]), ("b", &[3, 4])], s), Box::new(move |t, p| contract(t, ops::sub(p.get("a")?, p.get("b")?)?, s))),
        ("mul", params(&[("a", &[3, 4]), ("b", &[3, 4])], s), Box::new(move |t, p| contract(t, ops::mul(p.get("a")?, p.get("b")?)?, s))),
        ("scale", params(&[("a", &[5])], s), Box::new(move |t, p| contract(t, ops::scale(p.get("a")?, -1.7), s))),
        ("add_scalar", params(&[("a", &[5])], s), Box::new(move |t, p| contract(t, ops::add_scalar(p.get("a")?, 0.3), s))),
        ("exp", params(&[("a", &[6])], s), Box::new(move |t, p| contract(t, ops::exp(p.get("a")?), s))),
        ("sum", params(&[("a", &[2, 3])], s), Box::new(move |t, p| contract(t, ops::sum(p.get("a")?), s))),
        ("mean", params(&[("a", &[2, 3])], s), Box::new(move |t, p| contract(t, ops::mean(p.get("a")?), s))),
        ("silu", params(&[("a", &[8])], s), Box::new(move |t, p| contract(t, ops::silu(p.get("a")?), s))),
        (
            "linear",
            params(&[("x", &[2, 3]), ("w", &[3, 4]), ("b", &[4])], s),
            Box::new(move |t, p| contract(t, ops::linear(p.get("x")?, p.get("w")?, Some(p.get("b")?))?, s)),
        ),
        (
            "conv3d",
            params(&[("x", &[1, 2, 4, 4, 4]), ("k", &[3, 2, 3, 3, 3])], s),
            Box::new(move |t, p| contract(t, ops::conv3d(p.get("x")?, p.get("k")?, 1, 1)?, s)),
        ),
        (
            "conv3d_stride2",
            params(&[("x", &[2, 2, 4, 4, 4]), ("k", &[2, 2, 3, 3, 3])], s),
            Box::new(move |t, p| contract(t, ops::conv3d(p.get("x")?, p.get("k")?, 2, 1)?, s)),
        ),
        (
            "add_bias",
            params(&[("x", &[2, 3, 2, 2, 2]), ("b", &[3])], s),
            Box::new(move |t, p| contract(t, ops::add_bias(p.get("x")?, p.get("b")?)?, s)),
        ),
        (
            "add_bias_batched",
            params(&[("x", &[2, 3, 2, 2, 2]), ("b", &[2, 3])], s),
            Box::new(move |t, p| contract(t, ops::add_bias(p.get("x")?, p.get("b")?)?, s)),
        ),
        (
            "group_norm",
            params(&[("x", &[2, 4, 2, 2, 2]), ("g", &[4]), ("b", &[4])], s),
            Box::new(move |t, p| contract(t, ops::group_norm(p.get("x")?, 2, p.get("g")?, p.get("b")?, 1e-5)?, s)),
        ),
        (
            "l1_loss",
            params(&[("x", &[10])], s),
            Box::new(move |t, p| ops::l1_loss(p.get("x")?, &t.constant(randn(&[10], s + 99)))),
        ),
        (
            "mse_loss",
            params(&[("x", &[10])], s),
            Box::new(move |t, p| ops::mse_loss(p.get("x")?, &t.constant(randn(&[10], s + 99)))),
        ),
        (
            "concat_channels",
            params(&[("a", &[2, 1, 2, 2, 2]), ("b", &[2, 3, 2, 2, 2])], s),
            Box::new(move |t, p| contract(t, ops::concat_channels(&[p.get("a")?, p.get("b")?])?, s)),
        ),
        (
            "slice_channels",
            params(&[("x", &[2, 4, 2, 2, 2])], s),
            Box::new(move |t, p| contract(t, ops::slice_channels(p.get("x")?, 1, 2)?, s)),
        ),
        (
            "upsample_nearest2x",
            params(&[("x", &[1, 2, 2, 2, 2])], s),
            Box::new(move |t, p| contract(t, ops::upsample_nearest2x(p.get("x")?)?, s)),
        ),
        (
            "reshape",
            params(&[("x", &[2, 6])], s),
            Box::new(move |t, p| contract(t, ops::reshape(p.get("x")?, &[3, 4])?, s)),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, p, f)| (name, grad_check(f, &p, GRAD_H, GRAD_TOL).unwrap()))
        .collect()
}

fn at(v: &Volume, d: usize, h: usize, w: usize) -> f64 {
    v.data()[v.index(d, h, w)]
}

pub fn random_volume(ext: [usize; 3], seed: u64) -> Volume {
    let n = ext.iter().product();
    let t = Tensor::randn(vec![n], 0.4, &mut stream(seed, &[]));
    Volume::from_data(ext, t.into_data()).unwrap()
}

/// A noisy copy of `v` so metric pairs are correlated.
pub fn perturbed(v: &Volume, seed: u64, noise: f64) -> Volume {
    let e = Tensor::randn(vec![v.len()], noise, &mut stream(seed, &[]));
    Volume::from_data(v.extents(), v.data().iter().zip(e.data()).map(|(a, b)| a + b).collect()).unwrap()
}

pub fn naive_nmse(x: &Volume, r: &Volume) -> f64 {
    let [dd, hh, ww] = x.extents();
    let (mut num, mut den) = (0.0, 0.0);
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                let (a, b) = (at(x, d, h, w), at(r, d, h, w));
                num += (a - b).powi(2);
                den += b * b;
            }
        }
    }
    num / den
}

pub fn naive_psnr(x: &Volume, r: &Volume, range: f64) -> f64 {
    let [dd, hh, ww] = x.extents();
    let mut acc = 0.0;
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                acc += (at(x, d, h, w) - at(r, d, h, w)).powi(2);
            }
        }
    }
    let mse = acc / (dd * hh * ww) as f64;
    20.0 * range.log10() - 10.0 * mse.log10()
}

pub fn naive_ncc(x: &Volume, r: &Volume) -> f64 {
    let [dd, hh, ww] = x.extents();
    let n = (dd * hh * ww) as f64;
    let (mut sx, mut sr) = (0.0, 0.0);
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                sx += at(x, d, h, w);
                sr += at(r, d, h, w);
            }
        }
    }
    let (mx, mr) = (sx / n, sr / n);
    let (mut cxr, mut cxx, mut crr) = (0.0, 0.0, 0.0);
    for d in 0..dd {
        for h in 0..hh {
            for w in 0..ww {
                let (a, b) = (at(x, d, h, w) - mx, at(r, d, h, w) - mr);
                cxr += a * b;
                cxx += a * a;
                crr += b * b;
            }
        }
    }
    cxr / (cxx * crr).sqrt()
}

/// Windowed SSIM with an explicit 3-D Gaussian window (radius 3, sigma 1.5)
/// and centered second moments, averaged over interior voxels.
pub fn naive_ssim(x: &Volume, r: &Volume, range: f64) -> f64 {
    let rad = 3isize;
    let sigma = 1.5f64;
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let mut win = Vec::new();
    for i in -rad..=rad {
        for j in -rad..=rad {
            for k in -rad..=rad {
                win.push(((i, j, k), (-((i * i + j * j + k * k) as f64) / (2.0 * sigma * sigma)).exp()));
            }
        }
    }
    let z: f64 = win.iter().map(|(_, w)| w).sum();
    let [dd, hh, ww] = x.extents().map(|e| e as isize);
    let (mut total, mut count) = (0.0, 0.0);
    for d in rad..dd - rad {
        for h in rad..hh - rad {
            for w in rad..ww - rad {
                let at = |v: &Volume, (i, j, k): (isize, isize, isize)| {
                    at(v, (d + i) as usize, (h + j) as usize, (w + k) as usize)
                };
                let (mut mx, mut mr) = (0.0, 0.0);
                for &(o, g) in &win {
                    mx += g / z * at(x, o);
                    mr += g / z * at(r, o);
                }
                let (mut vx, mut vr, mut cov) = (0.0, 0.0, 0.0);
                for &(o, g) in &win {
                    let (a, b) = (at(x, o) - mx, at(r, o) - mr);
                    vx += g / z * a * a;
                    vr += g / z * b * b;
                    cov += g / z * a * b;
                }
                total += ((2.0 * mx * mr + c1) * (2.0 * cov + c2)) / ((mx * mx + mr * mr + c1) * (vx + vr + c2));
                count += 1.0;
            }
        }
    }
    total / count
}

/// Reference Welch results `(a, b, t, dof, p)` computed independently with
/// a standard statistics package.
pub const WELCH_REFERENCE: [(&[f64], &[f64], f64, f64, f64); 5] = [
    (&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0], -1.0, 8.0, 0.34659350708733416),
    (
        &[0.1, 0.5, 0.3, 0.9, 0.7, 0.2],
        &[1.1, 1.4, 0.8, 1.9],
        -3.1937438845342623,
        4.740191575908673,
        0.026045728372191854,
    ),
    (
        &[10.0, 12.5, 9.8, 11.2, 10.9, 13.1, 12.0],
        &[8.1, 7.7, 9.9, 8.8, 9.2, 8.0, 7.5, 9.1, 8.6],
        5.231624647002621,
        9.619377400614239,
        0.00043529145127260254,
    ),
    (&[2.0, 2.1], &[5.0, 9.0, 1.0], -1.2770881881060157, 2.001874559723094, 0.3296886527091713),
    (
        &[0.063, 0.051, 0.122, 0.030, 0.044, 0.088, 0.071, 0.059],
        &[0.117, 0.104, 0.151, 0.098, 0.133, 0.125, 0.090, 0.141],
        -4.260887191116182,
        13.014882331152487,
        0.0009259316033420853,
    ),
];
