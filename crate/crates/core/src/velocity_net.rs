//! Conditional 3D U-Net predicting a velocity (or noise) field from the noisy
//! latent concatenated with the two conditioning latents.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{ops, BoundParams, Parameters, Tape, Tensor, Var};

const GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub channels_per_level: Vec<usize>,
    pub res_blocks_per_level: usize,
    pub time_embed_dim: usize,
    pub groups: usize,
}

impl UNetConfig {
    /// Desk-scale default for `latent_channels`-channel latents with both
    /// conditioning streams.
    pub fn desk(latent_channels: usize) -> Self {
        Self {
            in_channels: 3 * latent_channels,
            out_channels: latent_channels,
            channels_per_level: vec![16, 16, 32],
            res_blocks_per_level: 2,
            time_embed_dim: 64,
            groups: 4,
        }
    }

    /// Full-width configuration: `[128, 128, 256]`, two residual blocks.
    pub fn full(latent_channels: usize) -> Self {
        Self {
            in_channels: 3 * latent_channels,
            out_channels: latent_channels,
            channels_per_level: vec![128, 128, 256],
            res_blocks_per_level: 2,
            time_embed_dim: 512,
            groups: 32,
        }
    }

    /// Two levels of four channels; small enough for finite differences.
    pub fn tiny(latent_channels: usize) -> Self {
        Self {
            in_channels: 3 * latent_channels,
            out_channels: latent_channels,
            channels_per_level: vec![4, 4],
            res_blocks_per_level: 1,
            time_embed_dim: 8,
            groups: 2,
        }
    }

    pub fn levels(&self) -> usize {
        self.channels_per_level.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.levels() < 2 {
            return bad(format!("U-Net needs >= 2 levels, got {:?}", self.channels_per_level));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.res_blocks_per_level == 0 {
            return bad("U-Net channel and block counts must be positive".into());
        }
        if self.groups == 0 || self.channels_per_level.iter().any(|c| *c == 0 || c % self.groups != 0) {
            return bad(format!(
                "channels {:?} must be positive multiples of groups = {}",
                self.channels_per_level, self.groups
            ));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::OddDim(self.time_embed_dim));
        }
        Ok(())
    }

    /// Spatial extents must halve cleanly at every downsampling.
    pub fn check_extents(&self, extents: &[usize]) -> Result<()> {
        let f = 1usize << (self.levels() - 1);
        if extents.iter().any(|&e| e == 0 || e % f != 0) {
            return Err(Error::IndivisibleExtent(format!(
                "latent extents {extents:?} not divisible by {f}"
            )));
        }
        Ok(())
    }
}

/// Sinusoidal features `[sin(t w_i), cos(t w_i)]` with `w_i` geometric from
/// 1 to 1e4.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::OddDim(dim));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for (i, w) in time_frequencies(half).into_iter().enumerate() {
        out[i] = (t * w).sin();
        out[half + i] = (t * w).cos();
    }
    Ok(out)
}

pub fn time_frequencies(half: usize) -> Vec<f64> {
    if half == 1 {
        return vec![1.0];
    }
    (0..half)
        .map(|i| 10f64.powf(4.0 * i as f64 / (half - 1) as f64))
        .collect()
}

/// The two conditioning latents with their ablation switches.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningLatents {
    pub t1w: Tensor,
    pub flair: Tensor,
    pub mask_t1w: bool,
    pub mask_flair: bool,
}

impl ConditioningLatents {
    pub fn new(t1w: Tensor, flair: Tensor) -> Result<Self> {
        t1w.expect_same_shape(&flair)?;
        Ok(Self {
            t1w,
            flair,
            mask_t1w: false,
            mask_flair: false,
        })
    }

    pub fn masked(mut self, mask_t1w: bool, mask_flair: bool) -> Self {
        self.mask_t1w = mask_t1w;
        self.mask_flair = mask_flair;
        self
    }

    /// `[t1w || flair]` along channels, with masked streams zeroed.
    pub fn stacked(&self) -> Result<Tensor> {
        let zero = |t: &Tensor| Tensor::zeros(t.shape().to_vec());
        let a = if self.mask_t1w { zero(&self.t1w) } else { self.t1w.clone() };
        let b = if self.mask_flair { zero(&self.flair) } else { self.flair.clone() };
        Tensor::concat_channels(&[&a, &b])
    }
}

/// `[z_t || t1w || flair]` along channels.
pub fn assemble_input(z_t: &Tensor, c: &ConditioningLatents) -> Result<Tensor> {
    z_t.expect_same_shape(&c.t1w)?;
    Tensor::concat_channels(&[z_t, &c.stacked()?])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNet {
    pub config: UNetConfig,
}

struct Ctx<'a> {
    p: &'a BoundParams,
    groups: usize,
}

impl Ctx<'_> {
    fn conv(&self, name: &str, x: &Var, stride: usize) -> Result<Var> {
        let w = self.p.get(&format!("{name}.w"))?;
        let pad = w.shape()[2] / 2;
        let y = ops::conv3d(x, w, stride, pad)?;
        ops::add_bias(&y, self.p.get(&format!("{name}.b"))?)
    }

    fn norm_act(&self, name: &str, x: &Var) -> Result<Var> {
        let g = self.p.get(&format!("{name}.g"))?;
        let b = self.p.get(&format!("{name}.b"))?;
        Ok(ops::silu(&ops::group_norm(x, self.groups, g, b, GN_EPS)?))
    }

    fn dense(&self, name: &str, x: &Var) -> Result<Var> {
        let w = self.p.get(&format!("{name}.w"))?;
        ops::linear(x, w, Some(self.p.get(&format!("{name}.b"))?))
    }

    fn res_block(&self, name: &str, x: &Var, temb: &Var) -> Result<Var> {
        let h = self.conv(&format!("{name}.conv1"), &self.norm_act(&format!("{name}.gn1"), x)?, 1)?;
        let h = ops::add_bias(&h, &self.dense(&format!("{name}.temb"), temb)?)?;
        let h = self.conv(&format!("{name}.conv2"), &self.norm_act(&format!("{name}.gn2"), &h)?, 1)?;
        let skip_name = format!("{name}.skip");
        let skip = if self.p.get(&format!("{skip_name}.w")).is_ok() {
            self.conv(&skip_name, x, 1)?
        } else {
            x.clone()
        };
        ops::add(&skip, &h)
    }
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// He-normal convolutions, unit norms, zero biases and a zero output
    /// convolution so the initial prediction is exactly zero.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Parameters> {
        let c = &self.config;
        let mut p = Parameters::new();
        let conv = |p: &mut Parameters, name: &str, cin: usize, cout: usize, k: usize, rng: &mut R| {
            let std = (2.0 / (cin * k * k * k) as f64).sqrt();
            p.insert_randn(format!("{name}.w"), &[cout, cin, k, k, k], std, rng)?;
            p.insert(format!("{name}.b"), Tensor::zeros([cout]))
        };
        let norm = |p: &mut Parameters, name: &str, ch: usize| -> Result<()> {
            p.insert(format!("{name}.g"), Tensor::ones([ch]))?;
            p.insert(format!("{name}.b"), Tensor::zeros([ch]))
        };
        let dense = |p: &mut Parameters, name: &str, i: usize, o: usize, rng: &mut R| -> Result<()> {
            p.insert_randn(format!("{name}.w"), &[i, o], (1.0 / i as f64).sqrt(), rng)?;
            p.insert(format!("{name}.b"), Tensor::zeros([o]))
        };
        let e = c.time_embed_dim;
        let ch = &c.channels_per_level;
        dense(&mut p, "temb.l1", e, e, rng)?;
        dense(&mut p, "temb.l2", e, e, rng)?;
        conv(&mut p, "conv_in", c.in_channels, ch[0], 3, rng)?;

        let res = |p: &mut Parameters, name: &str, cin: usize, cout: usize, rng: &mut R| -> Result<()> {
            norm(p, &format!("{name}.gn1"), cin)?;
            conv(p, &format!("{name}.conv1"), cin, cout, 3, rng)?;
            dense(p, &format!("{name}.temb"), e, cout, rng)?;
            norm(p, &format!("{name}.gn2"), cout)?;
            conv(p, &format!("{name}.conv2"), cout, cout, 3, rng)?;
            if cin != cout {
                conv(p, &format!("{name}.skip"), cin, cout, 1, rng)?;
            }
            Ok(())
        };
        let mut cur = ch[0];
        for (l, &cl) in ch.iter().enumerate() {
            for r in 0..c.res_blocks_per_level {
                res(&mut p, &format!("down{l}.res{r}"), cur, cl, rng)?;
                cur = cl;
            }
            if l + 1 < ch.len() {
                conv(&mut p, &format!("down{l}.ds"), cl, cl, 3, rng)?;
            }
        }
        for l in (0..ch.len() - 1).rev() {
            conv(&mut p, &format!("up{l}.us"), cur, ch[l], 3, rng)?;
            cur = 2 * ch[l];
            for r in 0..c.res_blocks_per_level {
                res(&mut p, &format!("up{l}.res{r}"), cur, ch[l], rng)?;
                cur = ch[l];
            }
        }
        norm(&mut p, "out.gn", ch[0])?;
        p.insert(
            "out.conv.w",
            Tensor::zeros([c.out_channels, ch[0], 3, 3, 3]),
        )?;
        p.insert("out.conv.b", Tensor::zeros([c.out_channels]))?;
        Ok(p)
    }

    /// Differentiable forward on an assembled input `x[B, in, D, H, W]` with
    /// one time per batch item.
    pub fn forward(&self, p: &BoundParams, x: &Var, times: &[f64]) -> Result<Var> {
        let c = &self.config;
        let shape = x.shape();
        if shape.len() != 5 || shape[1] != c.in_channels {
            return Err(shape_err(format!(
                "U-Net expects [B, {}, D, H, W], got {shape:?}",
                c.in_channels
            )));
        }
        if times.len() != shape[0] {
            return Err(shape_err(format!("{} times for batch {}", times.len(), shape[0])));
        }
        c.check_extents(&shape[2..])?;
        let tape = x.tape();
        let ctx = Ctx { p, groups: c.groups };

        let mut sin = Vec::with_capacity(times.len() * c.time_embed_dim);
        for &t in times {
            sin.extend(time_embed(t, c.time_embed_dim)?);
        }
        let sin = tape.constant(Tensor::new([times.len(), c.time_embed_dim], sin)?);
        let temb = ctx.dense("temb.l2", &ops::silu(&ctx.dense("temb.l1", &sin)?))?;
        let temb = ops::silu(&temb);

        let ch = &c.channels_per_level;
        let mut h = ctx.conv("conv_in", x, 1)?;
        let mut skips = Vec::new();
        for l in 0..ch.len() {
            for r in 0..c.res_blocks_per_level {
                h = ctx.res_block(&format!("down{l}.res{r}"), &h, &temb)?;
            }
            if l + 1 < ch.len() {
                skips.push(h.clone());
                h = ctx.conv(&format!("down{l}.ds"), &h, 2)?;
            }
        }
        for l in (0..ch.len() - 1).rev() {
            h = ctx.conv(&format!("up{l}.us"), &ops::upsample_nearest2x(&h)?, 1)?;
            h = ops::concat_channels(&[&h, &skips[l]])?;
            for r in 0..c.res_blocks_per_level {
                h = ctx.res_block(&format!("up{l}.res{r}"), &h, &temb)?;
            }
        }
        ctx.conv("out.conv", &ctx.norm_act("out.gn", &h)?, 1)
    }

    /// Inference without gradients: `x` assembled, one shared time.
    pub fn predict(&self, params: &Parameters, x: &Tensor, t: f64) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = params.bind_frozen(&tape);
        let xv = tape.constant(x.clone());
        let times = vec![t; x.shape().first().copied().unwrap_or(1)];
        Ok(self.forward(&bound, &xv, &times)?.to_tensor())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::grad_check;

    #[test]
    fn sinusoid_examples() {
        let e = time_embed(0.0, 8).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        let a = time_embed(0.1, 8).unwrap();
        let b = time_embed(0.9, 8).unwrap();
        assert!(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() > 0.0);
        let w = time_frequencies(5);
        assert_eq!(w[0], 1.0);
        assert!((w[4] - 1e4).abs() < 1e-9);
        assert!((w[2] / w[1] - w[1] / w[0]).abs() < 1e-9);
        assert!(matches!(time_embed(0.3, 7), Err(Error::OddDim(7))));
    }

    fn latents(seed: u64, shape: [usize; 5]) -> Tensor {
        Tensor::randn(shape, 1.0, &mut stream(seed, &[]))
    }

    #[test]
    fn assembly_order_and_masks() {
        let s = [1, 4, 2, 2, 2];
        let (z, a, b) = (latents(1, s), latents(2, s), latents(3, s));
        let c = ConditioningLatents::new(a.clone(), b.clone()).unwrap();
        let x = assemble_input(&z, &c).unwrap();
        assert_eq!(x.shape(), &[1, 12, 2, 2, 2]);
        assert_eq!(&x.data()[32..64], a.data());
        let swapped = assemble_input(&z, &ConditioningLatents::new(b, a).unwrap()).unwrap();
        assert_ne!(x, swapped);
        let masked = assemble_input(&z, &c.clone().masked(false, true)).unwrap();
        assert!(masked.data()[64..].iter().all(|&v| v == 0.0));
        assert_eq!(&masked.data()[..64], &x.data()[..64]);
        assert!(assemble_input(&latents(4, [1, 4, 2, 2, 4]), &c).is_err());
    }

    #[test]
    fn shapes_and_determinism() {
        let net = UNet::new(UNetConfig::tiny(4)).unwrap();
        let mut params = net.init_params(&mut stream(5, &[])).unwrap();
        let x = latents(6, [2, 12, 8, 8, 8]);
        let y = net.predict(&params, &x, 0.3).unwrap();
        assert_eq!(y.shape(), &[2, 4, 8, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));

        let w = params.get_mut("out.conv.w").unwrap();
        *w = Tensor::randn(w.shape().to_vec(), 0.1, &mut stream(7, &[]));
        let y1 = net.predict(&params, &x, 0.3).unwrap();
        assert_eq!(y1, net.predict(&params, &x, 0.3).unwrap());
        let mut x2 = x.clone();
        x2.data_mut()[4 * 512 + 3] += 1.0;
        assert!(net.predict(&params, &x2, 0.3).unwrap().l2_distance(&y1).unwrap() > 0.0);
        assert!(net.predict(&params, &x, 0.7).unwrap().l2_distance(&y1).unwrap() > 0.0);
        assert!(matches!(
            net.predict(&params, &latents(8, [1, 12, 5, 6, 6]), 0.1),
            Err(Error::IndivisibleExtent(_))
        ));
    }

    #[test]
    fn desk_parameter_count_is_stable() {
        let net = UNet::new(UNetConfig::desk(4)).unwrap();
        let a = net.init_params(&mut stream(1, &[])).unwrap();
        let b = net.init_params(&mut stream(1, &[])).unwrap();
        assert_eq!(a.num_elements(), b.num_elements());
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_through_small_net() {
        let cfg = UNetConfig {
            in_channels: 2,
            out_channels: 1,
            channels_per_level: vec![2, 2],
            res_blocks_per_level: 1,
            time_embed_dim: 4,
            groups: 1,
        };
        let net = UNet::new(cfg).unwrap();
        let mut params = net.init_params(&mut stream(9, &[])).unwrap();
        for (name, t) in params.iter_mut() {
            if name.ends_with(".b") || name == "out.conv.w" {
                *t = Tensor::randn(t.shape().to_vec(), 0.1, &mut stream(crate::rng::tag(name), &[]));
                t.set_requires_grad(true);
            }
        }
        let x = latents(10, [1, 2, 2, 2, 2]);
        let target = latents(11, [1, 1, 2, 2, 2]);
        let report = grad_check(
            |tape, p| {
                let y = net.forward(p, &tape.constant(x.clone()), &[0.4])?;
                ops::mse_loss(&y, &tape.constant(target.clone()))
            },
            &params,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures.first());
    }
}
