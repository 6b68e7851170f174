use rand::distr::Open01;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{check_t, Denoiser};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{ops, Tape, Tensor, Var};

/// Interpolation schedule `alpha(t)` of the straight path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alpha {
    #[default]
    Linear,
}

impl Alpha {
    pub fn at(self, t: f64) -> f64 {
        match self {
            Alpha::Linear => t,
        }
    }

    pub fn rate(self, _t: f64) -> f64 {
        match self {
            Alpha::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimestepDist {
    /// `sigmoid(loc + scale * n)`, then the resolution shift
    /// `s t / (1 + (s - 1) t)` (identity at `shift = 1`).
    LogitNormal {
        loc: f64,
        scale: f64,
        #[serde(default = "unit")]
        shift: f64,
    },
    Uniform,
}

fn unit() -> f64 {
    1.0
}

impl Default for TimestepDist {
    fn default() -> Self {
        Self::LogitNormal {
            loc: 0.0,
            scale: 1.0,
            shift: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RFlowSchedule {
    pub train_timesteps: usize,
    pub alpha: Alpha,
    pub steps: usize,
    pub timestep_dist: TimestepDist,
}

impl Default for RFlowSchedule {
    fn default() -> Self {
        Self {
            train_timesteps: 1000,
            alpha: Alpha::Linear,
            steps: 200,
            timestep_dist: TimestepDist::default(),
        }
    }
}

impl RFlowSchedule {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 || self.train_timesteps < self.steps {
            return Err(Error::ConfigInvalid(format!(
                "rflow needs 1 <= steps <= train_timesteps, got {} and {}",
                self.steps, self.train_timesteps
            )));
        }
        if let TimestepDist::LogitNormal { scale, shift, .. } = self.timestep_dist {
            if !(scale > 0.0) || !(shift > 0.0) {
                return Err(Error::ConfigInvalid(format!(
                    "logit-normal needs scale > 0 and shift > 0, got {scale} and {shift}"
                )));
            }
        }
        Ok(())
    }

    /// Euler sampling with this schedule's step count.
    pub fn sample(&self, net: &dyn Denoiser, z_init: &Tensor) -> Result<(Tensor, usize)> {
        rf_sample(net, z_init, self.steps)
    }
}

/// `(1 - alpha(t)) z0 + alpha(t) z1` with linear `alpha`.
pub fn rf_interpolate(z0: &Tensor, z1: &Tensor, t: f64) -> Result<Tensor> {
    check_t(t)?;
    let a = Alpha::Linear.at(t);
    z0.zip_map(z1, |x0, x1| (1.0 - a) * x0 + a * x1)
}

/// `alpha'(t) (z1 - z0)`; constant in `t` for the linear path.
pub fn rf_target_velocity(z0: &Tensor, z1: &Tensor, t: f64) -> Result<Tensor> {
    check_t(t)?;
    let r = Alpha::Linear.rate(t);
    z0.zip_map(z1, |x0, x1| r * (x1 - x0))
}

pub fn sample_train_t<R: Rng + ?Sized>(dist: &TimestepDist, rng: &mut R) -> f64 {
    match *dist {
        TimestepDist::LogitNormal { loc, scale, shift } => {
            let n: f64 = rng.sample(StandardNormal);
            let u = 1.0 / (1.0 + (-(loc + scale * n)).exp());
            let t = shift * u / (1.0 + (shift - 1.0) * u);
            t.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
        }
        TimestepDist::Uniform => rng.sample(Open01),
    }
}

/// One-sample-per-item flow-matching loss on a batch `z0[B, ...]`:
/// draws `z1 ~ N(0, I)` and `t`, then returns
/// `l1(net(z_t, t), z1 - z0)`. `net` receives the noisy batch as a constant
/// on `tape` and one time per item.
pub fn rflow_loss<R, F>(tape: &Tape, net: F, z0: &Tensor, sched: &RFlowSchedule, rng: &mut R) -> Result<Var>
where
    R: Rng + ?Sized,
    F: FnOnce(&Var, &[f64]) -> Result<Var>,
{
    let batch = *z0.shape().first().ok_or_else(|| shape_err("rflow_loss on a scalar"))?;
    let per = z0.numel() / batch.max(1);
    let z1 = Tensor::randn(z0.shape().to_vec(), 1.0, rng);
    let ts: Vec<f64> = (0..batch).map(|_| sample_train_t(&sched.timestep_dist, rng)).collect();
    let mut zt = vec![0.0; z0.numel()];
    for (b, &t) in ts.iter().enumerate() {
        let a = sched.alpha.at(t);
        for i in b * per..(b + 1) * per {
            zt[i] = (1.0 - a) * z0.data()[i] + a * z1.data()[i];
        }
    }
    let target = z0.zip_map(&z1, |x0, x1| x1 - x0)?;
    let zt = tape.constant(Tensor::new(z0.shape().to_vec(), zt)?);
    let pred = net(&zt, &ts)?;
    ops::l1_loss(&pred, &tape.constant(target))
}

/// Explicit Euler from `t = 1` to `t = 0` on the grid `t_k = k / steps`:
/// `z <- z - v(z, t_k) / steps`. Returns the endpoint and the number of
/// network evaluations.
pub fn rf_sample(net: &dyn Denoiser, z_init: &Tensor, steps: usize) -> Result<(Tensor, usize)> {
    if steps < 1 {
        return Err(Error::ConfigInvalid("rf_sample needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z_init.clone();
    let mut nfe = 0;
    for k in (1..=steps).rev() {
        let t = k as f64 / steps as f64;
        let v = net.predict(&z, t)?;
        nfe += 1;
        z.expect_same_shape(&v)?;
        z.data_mut().iter_mut().zip(v.data()).for_each(|(zi, vi)| *zi -= dt * vi);
    }
    Ok((z, nfe))
}
