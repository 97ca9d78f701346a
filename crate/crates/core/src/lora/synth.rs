//! Synthetic adapters for the toy backbone.
//!
//! A content adapter pulls the attention of its trigger and concept tokens
//! toward one image quadrant: a rank-1 key delta `u c^T` per block, with `c`
//! chosen so that `c . e = 1` for both the trigger and the concept embedding
//! and `u` aligned with how queries inside the quadrant differ from queries
//! outside it on a probe pass. A value delta along the same `c` gives the
//! concept its own appearance. Style adapters only recolor the output
//! projection.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LoraAdapter, LoraLayerDelta};
use crate::backend::toy::{block_key, ToyBackend, LATENT_OUT, TEXT_PROJ};
use crate::composition::LoraId;
use crate::error::{Error, Result};
use crate::lora::LoraSet;
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    #[serde(rename = "nw")]
    NorthWest,
    #[serde(rename = "ne")]
    NorthEast,
    #[serde(rename = "sw")]
    SouthWest,
    #[serde(rename = "se")]
    SouthEast,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Self::NorthWest, Self::SouthEast, Self::NorthEast, Self::SouthWest];

    /// Quadrant for the `i`-th content adapter when none is configured.
    pub fn nth(i: usize) -> Self {
        Self::ALL[i % 4]
    }

    /// Whether pixel `(row, col)` of a `size x size` grid lies inside.
    pub fn contains(self, row: usize, col: usize, size: usize) -> bool {
        let top = row < size / 2;
        let left = col < size / 2;
        match self {
            Self::NorthWest => top && left,
            Self::NorthEast => top && !left,
            Self::SouthWest => !top && left,
            Self::SouthEast => !top && !left,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyAdapterSpec {
    pub lora_id: LoraId,
    pub trigger: String,
    /// `None` makes a style adapter.
    pub concept: Option<String>,
    pub quadrant: Quadrant,
    pub rank: usize,
    /// Target mean logit gap between the quadrant and the rest.
    pub strength: f64,
    pub value_strength: f64,
    /// Also perturb the text projection.
    pub text_encoder: bool,
}

impl ToyAdapterSpec {
    pub fn content(lora_id: &str, concept: &str, quadrant: Quadrant) -> Self {
        Self {
            lora_id: LoraId::from(lora_id),
            trigger: lora_id.to_string(),
            concept: Some(concept.to_string()),
            quadrant,
            rank: 1,
            strength: 4.0,
            value_strength: 2.0,
            text_encoder: false,
        }
    }

    pub fn style(lora_id: &str) -> Self {
        Self {
            concept: None,
            ..Self::content(lora_id, "", Quadrant::NorthWest)
        }
    }
}

fn round_f32(m: Array2<f64>) -> Array2<f64> {
    m.mapv(|v| f64::from(v as f32))
}

fn delta(key: String, down: Array2<f64>, up: Array2<f64>) -> Result<LoraLayerDelta> {
    let rank = down.nrows() as f64;
    LoraLayerDelta::new(key, round_f32(down), round_f32(up), rank)
}

fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit std");
    let v: Array1<f64> = Array1::from_shape_simple_fn(n, || normal.sample(rng));
    let norm = v.dot(&v).sqrt();
    v / norm
}

/// Minimum-norm `c` with `c . e_i = 1` for every row `e_i`.
fn dual_direction(rows: &Array2<f64>) -> Result<Array1<f64>> {
    let gram = rows.dot(&rows.t());
    let n = gram.nrows();
    // Gaussian elimination with partial pivoting on [G | 1].
    let mut a = gram.clone();
    let mut b = Array1::<f64>::ones(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))
            .expect("non-empty");
        if a[[pivot, col]].abs() < 1e-9 {
            return Err(Error::NumericalFailure("degenerate token embeddings".into()));
        }
        for k in 0..n {
            a.swap([col, k], [pivot, k]);
        }
        b.swap(col, pivot);
        for i in col + 1..n {
            let f = a[[i, col]] / a[[col, col]];
            for k in col..n {
                a[[i, k]] -= f * a[[col, k]];
            }
            b[i] -= f * b[col];
        }
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let tail: f64 = (i + 1..n).map(|k| a[[i, k]] * x[k]).sum();
        x[i] = (b[i] - tail) / a[[i, i]];
    }
    Ok(rows.t().dot(&x))
}

fn span_mean(emb: &Array2<f64>, span: std::ops::Range<usize>) -> Array1<f64> {
    emb.slice(ndarray::s![span, ..]).mean_axis(Axis(0)).expect("non-empty span")
}

/// Builds the toy adapter described by `spec` for `backend`. `seed` drives
/// the random parts (value direction, extra rank components, text delta).
pub fn synth_toy_adapter(seed: u64, spec: &ToyAdapterSpec, backend: &ToyBackend) -> Result<LoraAdapter> {
    if spec.rank == 0 {
        return Err(Error::InvalidConfig(format!("{}: rank must be >= 1", spec.lora_id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = backend.config().clone();
    let mut adapter = LoraAdapter::new(spec.lora_id.clone(), spec.trigger.clone());

    if spec.text_encoder {
        let u = random_unit(&mut rng, cfg.d_text) * 0.1;
        let v = random_unit(&mut rng, cfg.d_text);
        adapter = adapter.with_text_delta(delta(
            TEXT_PROJ.into(),
            v.insert_axis(Axis(0)),
            u.insert_axis(Axis(1)),
        )?);
    }

    let Some(concept) = &spec.concept else {
        let u = random_unit(&mut rng, cfg.channels) * 0.5;
        let v = random_unit(&mut rng, cfg.d_model);
        return Ok(adapter.with_delta(delta(
            LATENT_OUT.into(),
            v.insert_axis(Axis(0)),
            u.insert_axis(Axis(1)),
        )?));
    };

    let text = format!("{} {}", spec.trigger, concept);
    let tok = cfg.tokenizer.tokenize(&text)?;
    let trig_tokens: Vec<String> = cfg.tokenizer.normalize(&spec.trigger);
    let concept_tokens: Vec<String> = cfg.tokenizer.normalize(concept);
    let trig_span = tok.find_span(&trig_tokens).ok_or_else(|| Error::SpanNotFound {
        concept: spec.trigger.clone(),
        prompt: text.clone(),
    })?;
    let concept_span = tok.find_span(&concept_tokens).ok_or_else(|| Error::SpanNotFound {
        concept: concept.clone(),
        prompt: text.clone(),
    })?;
    let emb = backend.embed_text(&text, &LoraSet::empty())?;
    let mut rows = Array2::zeros((2, cfg.d_text));
    rows.row_mut(0).assign(&span_mean(&emb, trig_span));
    rows.row_mut(1).assign(&span_mean(&emb, concept_span));
    let c = dual_direction(&rows)?;

    // Probe pass: zero latent at the first timestep.
    let unet = backend.patched_unet(&LoraSet::empty())?;
    let z = ndarray::Array3::zeros((cfg.channels, cfg.size, cfg.size));
    let fwd = backend.forward(&unet, &z, &emb, backend.schedule_timestep(0));
    let inside: Vec<bool> = (0..cfg.size * cfg.size)
        .map(|p| spec.quadrant.contains(p / cfg.size, p % cfg.size, cfg.size))
        .collect();
    let dh = cfg.d_model / cfg.heads;
    let value_dir = random_unit(&mut rng, cfg.d_model) * spec.value_strength;

    for (b, cache) in fwd.blocks.iter().enumerate() {
        let q = cache.input.dot(&unet.blocks[b].to_q.t());
        let mut mean_in = Array1::<f64>::zeros(cfg.d_model);
        let mut mean_out = Array1::<f64>::zeros(cfg.d_model);
        let n_in = inside.iter().filter(|&&x| x).count() as f64;
        let n_out = inside.len() as f64 - n_in;
        for (p, row) in q.rows().into_iter().enumerate() {
            if inside[p] {
                mean_in.scaled_add(1.0 / n_in, &row);
            } else {
                mean_out.scaled_add(1.0 / n_out, &row);
            }
        }
        let diff = mean_in - mean_out;
        let mut u = Array1::<f64>::zeros(cfg.d_model);
        for m in 0..cfg.heads {
            let r = m * dh..(m + 1) * dh;
            let d = diff.slice(ndarray::s![r.clone()]);
            let sq = d.dot(&d);
            if sq > 1e-12 {
                // gap = (u_m . d) / sqrt(dh) with u_m parallel to d
                let s = spec.strength * (dh as f64).sqrt() / sq;
                u.slice_mut(ndarray::s![r]).assign(&(&d * s));
            }
        }
        let mut downs = vec![c.clone()];
        let mut ups = vec![u];
        for _ in 1..spec.rank {
            downs.push(random_unit(&mut rng, cfg.d_text));
            ups.push(random_unit(&mut rng, cfg.d_model) * 0.01);
        }
        let down = ndarray::stack(Axis(0), &downs.iter().map(|v| v.view()).collect::<Vec<_>>()).expect("same length");
        let up = ndarray::stack(Axis(1), &ups.iter().map(|v| v.view()).collect::<Vec<_>>()).expect("same length");
        // alpha = rank so the stored factors are the applied delta
        adapter = adapter.with_delta(delta(block_key(b, "attn_to_k"), down, up)?);
        adapter = adapter.with_delta(delta(
            block_key(b, "attn_to_v"),
            c.clone().insert_axis(Axis(0)),
            value_dir.clone().insert_axis(Axis(1)),
        )?);
    }
    Ok(adapter)
}
