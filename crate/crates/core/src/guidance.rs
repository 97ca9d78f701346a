//! Contrastive latent optimization during sampling.
//!
//! Before the denoising pass of an early step, the shared latent takes
//! gradient steps `z <- z - alpha_t * grad L` on the grouped InfoNCE loss of
//! all variants' attention. Selected steps refine with several iterations;
//! after the cutoff the latent is left alone.

use std::collections::BTreeSet;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::attention::ContrastiveObjective;
use crate::backend::{Conditioning, DenoiserBackend, LatentState};
use crate::composition::ConceptGroup;
use crate::error::{Error, Result};

fn default_temperature() -> f64 {
    0.5
}
fn default_alpha0() -> f64 {
    20.0
}
fn default_refine() -> BTreeSet<usize> {
    BTreeSet::from([0, 10, 20])
}
fn default_inner() -> usize {
    5
}
fn default_cutoff() -> usize {
    25
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Step size at step 0; decays linearly to 0 over the run.
    #[serde(default = "default_alpha0", rename = "alpha0")]
    pub step_scale: f64,
    /// Steps that run `inner_iterations` updates instead of one.
    #[serde(default = "default_refine", rename = "refine_steps")]
    pub refinement_steps: BTreeSet<usize>,
    #[serde(default = "default_inner")]
    pub inner_iterations: usize,
    /// First step with no optimization.
    #[serde(default = "default_cutoff", rename = "cutoff")]
    pub cutoff_step: usize,
    #[serde(default = "default_true")]
    pub enabled: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            temperature: default_temperature(),
            step_scale: default_alpha0(),
            refinement_steps: default_refine(),
            inner_iterations: default_inner(),
            cutoff_step: default_cutoff(),
            enabled: true,
        }
    }
}

impl GuidanceConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    /// `total_steps`, when known, bounds the cutoff.
    pub fn validate(&self, total_steps: Option<usize>) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.step_scale >= 0.0 && self.step_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha0 must be >= 0, got {}", self.step_scale)));
        }
        if self.inner_iterations == 0 {
            return Err(Error::InvalidConfig("inner_iterations must be >= 1".into()));
        }
        if let Some(s) = self.refinement_steps.iter().find(|&&s| s >= self.cutoff_step) {
            return Err(Error::InvalidConfig(format!(
                "refinement step {s} is not before the cutoff {}",
                self.cutoff_step
            )));
        }
        if let Some(total) = total_steps {
            if self.cutoff_step > total {
                return Err(Error::InvalidConfig(format!(
                    "cutoff {} exceeds the {total} sampling steps",
                    self.cutoff_step
                )));
            }
        }
        Ok(())
    }

    /// Number of updates at `step`.
    pub fn iterations_at(&self, step: usize) -> usize {
        if !self.enabled || step >= self.cutoff_step {
            0
        } else if self.refinement_steps.contains(&step) {
            self.inner_iterations
        } else {
            1
        }
    }
}

/// Bookkeeping for one sampler step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub alpha: f64,
    /// Loss before each update.
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    /// Loss of the attention captured by the denoising pass after the updates.
    pub loss_after: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidanceTrace {
    pub steps: Vec<StepTrace>,
}

pub fn latent_update(z: &LatentState, grad: &Array3<f64>, alpha: f64) -> Result<LatentState> {
    if z.data.dim() != grad.dim() {
        return Err(Error::ContractViolation(format!(
            "latent {:?} vs gradient {:?}",
            z.data.dim(),
            grad.dim()
        )));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!("step size must be >= 0, got {alpha}")));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericalFailure("non-finite gradient".into()));
    }
    let mut data = z.data.clone();
    data.scaled_add(-alpha, grad);
    Ok(LatentState {
        data,
        timestep_index: z.timestep_index,
    })
}

pub fn alpha_schedule(step: usize, total_steps: usize, alpha0: f64) -> f64 {
    alpha0 * (1.0 - step as f64 / total_steps as f64)
}

/// Runs this step's updates on the shared latent. `branches` carry one
/// conditioning per variant, in the order of `branch_variants`.
pub fn optimize_latent(
    backend: &mut dyn DenoiserBackend,
    z: &LatentState,
    branches: &[Conditioning<'_>],
    groups: &[ConceptGroup],
    config: &GuidanceConfig,
    total_steps: usize,
) -> Result<(LatentState, StepTrace)> {
    let step = z.timestep_index;
    let alpha = alpha_schedule(step, total_steps, config.step_scale);
    let mut trace = StepTrace {
        step,
        alpha,
        losses: Vec::new(),
        grad_norms: Vec::new(),
        loss_after: None,
    };
    let iterations = config.iterations_at(step);
    if iterations == 0 {
        return Ok((z.clone(), trace));
    }
    let objective = ContrastiveObjective {
        groups,
        branch_variants: branches.iter().map(|b| b.embedding.variant_id).collect(),
        temperature: config.temperature,
    };
    let mut current = z.clone();
    for _ in 0..iterations {
        let lg = backend.grad_wrt_latent(&current, branches, &objective)?;
        trace.losses.push(lg.loss);
        trace.grad_norms.push(lg.grad.iter().map(|g| g * g).sum::<f64>().sqrt());
        if lg.loss == 0.0 {
            continue;
        }
        current = latent_update(&current, &lg.grad, alpha)?;
    }
    Ok((current, trace))
}
