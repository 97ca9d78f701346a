//! Denoiser backbones.
//!
//! [`DenoiserBackend`] is the contract the pipeline drives: tokenize and
//! encode prompts (optionally through LoRA-patched text encoders), run one
//! denoising step that can also hand back its cross-attention maps, and
//! differentiate an attention objective with respect to the latent.
//!
//! The contract for a real Stable Diffusion v1.5 adapter is the same trait:
//! `tokenizer` wraps the CLIP tokenizer (77 tokens), `encode_prompt` runs
//! CLIP with `lora_te_*` deltas applied, `denoise_step` runs the conditional
//! UNet pass (classifier-free guidance at scale 7.5 mixes in the
//! unconditional pass for the noise prediction only) and captures the
//! softmaxed cross-attention probabilities of every 16x16 block, and
//! `grad_wrt_latent` backpropagates an attention objective through those
//! conditional passes. Only the toy backend ships in this crate.

pub mod sampler;
pub mod toy;

use image::GrayImage;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::composition::{LoraId, PromptVariant};
use crate::error::{Error, Result};
use crate::lora::LoraSet;
use crate::tokenizer::Tokenizer;
pub use sampler::{sampler_step, DdimSchedule};

/// A spatial latent `(channels, h, w)` at a position in the sampling schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub data: Array3<f64>,
    pub timestep_index: usize,
}

impl LatentState {
    pub fn check_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NumericalFailure("non-finite latent".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    /// `(l, d_text)`
    pub data: Array2<f64>,
    pub variant_id: usize,
    pub encoder_lora: Option<LoraId>,
}

/// Cross-attention probabilities of one layer, averaged over its heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layer_id: usize,
    pub head_count: usize,
    pub resolution: (usize, usize),
    /// `(h * w, l)`, each row a distribution over tokens.
    pub map: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub noise_prediction: Array3<f64>,
    pub records: Vec<AttentionRecord>,
}

/// Conditioning for one branch of a differentiable evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    pub embedding: &'a PromptEmbedding,
    pub loras: &'a LoraSet,
}

/// Scalar objective over captured attention, with its gradient.
pub trait AttentionObjective {
    /// `records[b]` are branch `b`'s captured records. Returns the loss and
    /// `d loss / d record.map` with the same nesting and shapes.
    fn evaluate(&self, records: &[Vec<AttentionRecord>]) -> Result<(f64, Vec<Vec<Array2<f64>>>)>;
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Array3<f64>,
}

pub trait DenoiserBackend: Send {
    fn name(&self) -> &str;

    fn tokenizer(&self) -> &dyn Tokenizer;

    /// `(channels, h, w)` of the latent.
    fn latent_shape(&self) -> (usize, usize, usize);

    fn schedule(&self) -> &DdimSchedule;

    /// Standard-normal starting latent for a seed.
    fn initial_latent(&self, seed: u64) -> LatentState;

    fn encode_prompt(&mut self, variant: &PromptVariant, loras: &LoraSet) -> Result<PromptEmbedding>;

    fn denoise_step(
        &mut self,
        z: &LatentState,
        embedding: &PromptEmbedding,
        loras: &LoraSet,
        capture: bool,
    ) -> Result<StepOutput>;

    /// Reverse-mode gradient of `objective` evaluated on the attention that
    /// each branch produces from the shared latent `z`.
    fn grad_wrt_latent(
        &mut self,
        z: &LatentState,
        branches: &[Conditioning<'_>],
        objective: &dyn AttentionObjective,
    ) -> Result<LossGrad>;

    fn decode(&self, z: &LatentState) -> Result<GrayImage>;
}

/// Checks that an objective's gradient has the same layout as the records.
pub(crate) fn check_objective_grads(records: &[Vec<AttentionRecord>], grads: &[Vec<Array2<f64>>]) -> Result<()> {
    let ok = records.len() == grads.len()
        && records
            .iter()
            .zip(grads)
            .all(|(r, g)| r.len() == g.len() && r.iter().zip(g).all(|(r, g)| r.map.dim() == g.dim()));
    if ok {
        Ok(())
    } else {
        Err(Error::ContractViolation(
            "objective gradient does not match the captured attention layout".into(),
        ))
    }
}
