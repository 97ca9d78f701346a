//! Test-time composition of several LoRA adapters in one diffusion sample.
//!
//! Each concept adapter runs in its own branch with a prompt variant that
//! carries its trigger word. A contrastive objective over cross-attention
//! maps steers the shared latent so that different concepts attend to
//! different places, and per-branch latents are fused through masks derived
//! from the same attention.

pub mod attention;
pub mod backend;
pub mod composition;
pub mod error;
pub mod guidance;
pub mod lora;
pub mod mask;
pub mod pipeline;
pub mod tokenizer;

pub use error::{Error, Result};
