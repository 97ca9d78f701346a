//! Deterministic DDIM (eta = 0) sampling.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::LatentState;
use crate::error::{Error, Result};

pub const TRAIN_TIMESTEPS: usize = 1000;
const BETA_START: f64 = 0.00085;
const BETA_END: f64 = 0.012;

/// Per-step cumulative alpha products. Step `i` moves from `alpha_bars[i]` to
/// `alpha_bars[i + 1]`, and the last step to `final_alpha_bar`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdimSchedule {
    pub timesteps: Vec<usize>,
    pub alpha_bars: Vec<f64>,
    pub final_alpha_bar: f64,
}

impl DdimSchedule {
    /// Scaled-linear betas over 1000 training steps, `steps` evenly spaced
    /// inference steps with offset 1.
    pub fn stable_diffusion(steps: usize) -> Result<Self> {
        if steps == 0 || steps > TRAIN_TIMESTEPS {
            return Err(Error::InvalidConfig(format!("steps must be in 1..={TRAIN_TIMESTEPS}, got {steps}")));
        }
        let (lo, hi) = (BETA_START.sqrt(), BETA_END.sqrt());
        let last = (TRAIN_TIMESTEPS - 1) as f64;
        let mut cumprod = Vec::with_capacity(TRAIN_TIMESTEPS);
        let mut acc = 1.0;
        for i in 0..TRAIN_TIMESTEPS {
            let b = lo + (hi - lo) * i as f64 / last;
            acc *= 1.0 - b * b;
            cumprod.push(acc);
        }
        let ratio = TRAIN_TIMESTEPS / steps;
        let timesteps: Vec<usize> = (0..steps).rev().map(|s| (s * ratio + 1).min(TRAIN_TIMESTEPS - 1)).collect();
        let alpha_bars = timesteps.iter().map(|&t| cumprod[t]).collect();
        Ok(Self {
            timesteps,
            alpha_bars,
            final_alpha_bar: cumprod[0],
        })
    }

    pub fn from_alpha_bars(alpha_bars: Vec<f64>, final_alpha_bar: f64) -> Result<Self> {
        let ok = |a: f64| a > 0.0 && a <= 1.0;
        if alpha_bars.is_empty() || !alpha_bars.iter().all(|&a| ok(a) && a < 1.0) || !ok(final_alpha_bar) {
            return Err(Error::InvalidConfig("alpha bars must lie in (0, 1)".into()));
        }
        let n = alpha_bars.len();
        Ok(Self {
            timesteps: (0..n).rev().collect(),
            alpha_bars,
            final_alpha_bar,
        })
    }

    pub fn len(&self) -> usize {
        self.alpha_bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bars.is_empty()
    }

    /// (alpha_bar at step i, alpha_bar after it).
    pub fn coefficients(&self, step: usize) -> Result<(f64, f64)> {
        let a = *self.alpha_bars.get(step).ok_or(Error::ScheduleExhausted {
            step,
            total: self.len(),
        })?;
        let prev = self.alpha_bars.get(step + 1).copied().unwrap_or(self.final_alpha_bar);
        Ok((a, prev))
    }
}

/// One DDIM step: predict the clean sample from the noise prediction, then
/// re-noise it to the next (lower) noise level.
pub fn sampler_step(z: &LatentState, noise_pred: &Array3<f64>, schedule: &DdimSchedule) -> Result<LatentState> {
    if z.data.dim() != noise_pred.dim() {
        return Err(Error::ContractViolation(format!(
            "latent {:?} vs noise prediction {:?}",
            z.data.dim(),
            noise_pred.dim()
        )));
    }
    let (a, a_prev) = schedule.coefficients(z.timestep_index)?;
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    let (pa, pb) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
    let mut data = z.data.clone();
    ndarray::Zip::from(&mut data).and(noise_pred).for_each(|x, &eps| {
        let x0 = (*x - sb * eps) / sa;
        *x = pa * x0 + pb * eps;
    });
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure(format!("non-finite latent after step {}", z.timestep_index)));
    }
    Ok(LatentState {
        data,
        timestep_index: z.timestep_index + 1,
    })
}
