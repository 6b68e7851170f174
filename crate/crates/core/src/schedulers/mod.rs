//! Rectified-flow and DDPM noise schedules, training targets and samplers.
//!
//! Networks see a time in `[0, 1]`: rectified flow passes its continuous `t`,
//! DDPM passes `step / T`.

mod ddpm;
mod rflow;

pub use ddpm::{ddpm_ancestral_step, ddpm_forward, ddpm_loss, ddpm_sample, DdpmSchedule};
pub use rflow::{
    rf_interpolate, rf_sample, rf_target_velocity, rflow_loss, sample_train_t, Alpha, RFlowSchedule,
    TimestepDist,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Network evaluated by the samplers: `(z, time) -> prediction`.
/// Conditioning is captured by the implementor.
pub trait Denoiser {
    fn predict(&self, z: &Tensor, time: f64) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, f64) -> Result<Tensor>> Denoiser for F {
    fn predict(&self, z: &Tensor, time: f64) -> Result<Tensor> {
        self(z, time)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum SchedulerConfig {
    Rflow(RFlowSchedule),
    Ddpm {
        #[serde(default = "ddpm::default_t")]
        train_timesteps: usize,
        #[serde(default = "ddpm::default_beta_start")]
        beta_start: f64,
        #[serde(default = "ddpm::default_beta_end")]
        beta_end: f64,
    },
}

impl SchedulerConfig {
    pub fn default_ddpm() -> Self {
        Self::Ddpm {
            train_timesteps: ddpm::default_t(),
            beta_start: ddpm::default_beta_start(),
            beta_end: ddpm::default_beta_end(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Rflow(s) => s.validate(),
            Self::Ddpm {
                train_timesteps,
                beta_start,
                beta_end,
            } => DdpmSchedule::linear(*train_timesteps, *beta_start, *beta_end).map(|_| ()),
        }
    }

    /// Steps taken at sampling time (network evaluations).
    pub fn sampling_steps(&self) -> usize {
        match self {
            Self::Rflow(s) => s.steps,
            Self::Ddpm { train_timesteps, .. } => *train_timesteps,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Rflow(_) => "rflow",
            Self::Ddpm { .. } => "ddpm",
        }
    }
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self::Rflow(RFlowSchedule::default())
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::TOutOfRange(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}
