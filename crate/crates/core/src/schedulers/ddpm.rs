use rand::Rng;
use rand_distr::StandardNormal;

use super::Denoiser;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{ops, Tape, Tensor, Var};

pub(super) fn default_t() -> usize {
    1000
}

pub(super) fn default_beta_start() -> f64 {
    1e-4
}

pub(super) fn default_beta_end() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdpmSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for DdpmSchedule {
    fn default() -> Self {
        Self::linear(default_t(), default_beta_start(), default_beta_end())
            .expect("default schedule is valid")
    }
}

impl DdpmSchedule {
    /// Betas spaced linearly from `beta_start` to `beta_end` over `t` steps.
    pub fn linear(t: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t == 0 {
            return Err(Error::ConfigInvalid("ddpm needs at least one timestep".into()));
        }
        let betas = (0..t)
            .map(|i| {
                if t == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::ConfigInvalid("ddpm betas must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Network time `t / T` for step `t`.
    pub fn net_time(&self, t: usize) -> f64 {
        t as f64 / self.len() as f64
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::TOutOfRange(format!("step {t} outside [0, {})", self.len())));
        }
        Ok(())
    }
}

/// `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn ddpm_forward(z0: &Tensor, t: usize, eps: &Tensor, sched: &DdpmSchedule) -> Result<Tensor> {
    sched.check(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, |x, e| a * x + b * e)
}

/// Posterior step `z_t -> z_{t-1}` with the epsilon prediction of `net`,
/// adding `sqrt(beta_t) n` noise except at `t = 0`.
pub fn ddpm_ancestral_step<R: Rng + ?Sized>(
    net: &dyn Denoiser,
    z_t: &Tensor,
    t: usize,
    sched: &DdpmSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    sched.check(t)?;
    let eps = net.predict(z_t, sched.net_time(t))?;
    let (beta, ab) = (sched.beta(t), sched.alpha_bar(t));
    let coef = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / sched.alpha(t).sqrt();
    let mut out = z_t.zip_map(&eps, |z, e| (z - coef * e) * inv)?;
    if t > 0 {
        let sigma = beta.sqrt();
        for v in out.data_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(out)
}

/// Full reverse chain from `T - 1` down to `0`; returns the sample and the
/// number of network evaluations.
pub fn ddpm_sample<R: Rng + ?Sized>(
    net: &dyn Denoiser,
    z_init: &Tensor,
    sched: &DdpmSchedule,
    rng: &mut R,
) -> Result<(Tensor, usize)> {
    let mut z = z_init.clone();
    for t in (0..sched.len()).rev() {
        z = ddpm_ancestral_step(net, &z, t, sched, rng)?;
    }
    Ok((z, sched.len()))
}

/// Epsilon-prediction MSE with one uniformly drawn step per batch item.
pub fn ddpm_loss<R, F>(tape: &Tape, net: F, z0: &Tensor, sched: &DdpmSchedule, rng: &mut R) -> Result<Var>
where
    R: Rng + ?Sized,
    F: FnOnce(&Var, &[f64]) -> Result<Var>,
{
    let batch = *z0.shape().first().ok_or_else(|| shape_err("ddpm_loss on a scalar"))?;
    let per = z0.numel() / batch.max(1);
    let eps = Tensor::randn(z0.shape().to_vec(), 1.0, rng);
    let ts: Vec<usize> = (0..batch).map(|_| rng.random_range(0..sched.len())).collect();
    let mut zt = vec![0.0; z0.numel()];
    for (b, &t) in ts.iter().enumerate() {
        let ab = sched.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        for i in b * per..(b + 1) * per {
            zt[i] = a * z0.data()[i] + s * eps.data()[i];
        }
    }
    let zt = tape.constant(Tensor::new(z0.shape().to_vec(), zt)?);
    let steps: Vec<f64> = ts.iter().map(|&t| sched.net_time(t)).collect();
    let pred = net(&zt, &steps)?;
    ops::mse_loss(&pred, &tape.constant(eps))
}
