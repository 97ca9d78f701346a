//! Small deterministic backbone for tests and desk-scale experiments.
//!
//! Text encoder: hashed-vocabulary embedding table followed by one linear
//! layer (`text_proj`). Denoiser: every latent pixel becomes a `d_model`
//! feature (`latent_in` plus fixed 2-D sinusoidal position and timestep
//! embeddings), then passes through cross-attention blocks over the prompt
//! tokens, each with a residual tanh MLP. `latent_out` reads a clean-sample
//! prediction, which is turned into a noise prediction with the schedule's
//! alpha-bar. Pixels never attend to each other, so the reverse pass is
//! independent per pixel.

use std::borrow::Cow;

use image::{imageops, GrayImage, Luma};
use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{
    check_objective_grads, AttentionObjective, AttentionRecord, Conditioning, DdimSchedule, DenoiserBackend,
    LatentState, LossGrad, PromptEmbedding, StepOutput,
};
use crate::composition::PromptVariant;
use crate::error::{Error, Result};
use crate::lora::LoraSet;
use crate::tokenizer::{Tokenizer, WordTokenizer};

pub const TEXT_PROJ: &str = "text_proj";
pub const LATENT_IN: &str = "latent_in";
pub const LATENT_OUT: &str = "latent_out";
const BLOCK_PARTS: [&str; 6] = ["attn_to_q", "attn_to_k", "attn_to_v", "attn_to_out", "ff_in", "ff_out"];

/// Pixel upscale factor of decoded images.
pub const DECODE_SCALE: u32 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub channels: usize,
    pub size: usize,
    pub d_text: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub blocks: usize,
    pub steps: usize,
    pub weight_seed: u64,
    pub tokenizer: WordTokenizer,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            size: 16,
            d_text: 32,
            d_model: 32,
            heads: 4,
            d_ff: 32,
            blocks: 2,
            steps: 50,
            weight_seed: 0,
            tokenizer: WordTokenizer::default(),
        }
    }
}

impl ToyConfig {
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }
}

pub fn block_key(block: usize, part: &str) -> String {
    format!("block{block}_{part}")
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub to_q: Array2<f64>,
    pub to_k: Array2<f64>,
    pub to_v: Array2<f64>,
    pub to_out: Array2<f64>,
    pub ff_in: Array2<f64>,
    pub ff_out: Array2<f64>,
}

impl Block {
    fn part_mut(&mut self, part: &str) -> Option<&mut Array2<f64>> {
        Some(match part {
            "attn_to_q" => &mut self.to_q,
            "attn_to_k" => &mut self.to_k,
            "attn_to_v" => &mut self.to_v,
            "attn_to_out" => &mut self.to_out,
            "ff_in" => &mut self.ff_in,
            "ff_out" => &mut self.ff_out,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Unet {
    pub latent_in: Array2<f64>,
    pub blocks: Vec<Block>,
    pub latent_out: Array2<f64>,
}

impl Unet {
    fn weight_mut(&mut self, key: &str) -> Option<&mut Array2<f64>> {
        match key {
            LATENT_IN => Some(&mut self.latent_in),
            LATENT_OUT => Some(&mut self.latent_out),
            _ => {
                let rest = key.strip_prefix("block")?;
                let (idx, part) = rest.split_once('_')?;
                self.blocks.get_mut(idx.parse::<usize>().ok()?)?.part_mut(part)
            }
        }
    }
}

/// Per-block activations kept for the reverse pass.
#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    /// Block input, `(P, d_model)`.
    pub input: Array2<f64>,
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
    /// Per-head attention, `(P, l)`.
    pub attn: Vec<Array2<f64>>,
    /// MLP activations `tanh(ff_in h)`, `(P, d_ff)`.
    pub act: Array2<f64>,
}

pub(crate) struct Forward {
    pub x0: Array2<f64>,
    pub blocks: Vec<BlockCache>,
}

pub struct ToyBackend {
    config: ToyConfig,
    embedding: Array2<f64>,
    text_proj: Array2<f64>,
    unet: Unet,
    positions: Array2<f64>,
    schedule: DdimSchedule,
    unet_keys: Vec<String>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl ToyBackend {
    pub fn new(config: ToyConfig) -> Result<Self> {
        if !config.d_model.is_multiple_of(config.heads) || !config.d_model.is_multiple_of(4) {
            return Err(Error::InvalidConfig("d_model must divide into heads and by 4".into()));
        }
        let schedule = DdimSchedule::stable_diffusion(config.steps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.weight_seed);
        let (c, dt, dm, dff) = (config.channels, config.d_text, config.d_model, config.d_ff);
        let vocab = config.tokenizer.vocab_size as usize;
        let embedding = gaussian(&mut rng, vocab, dt, 1.0);
        let text_proj = gaussian(&mut rng, dt, dt, 1.0 / (dt as f64).sqrt());
        let latent_in = gaussian(&mut rng, dm, c, 1.0 / (c as f64).sqrt());
        let blocks = (0..config.blocks)
            .map(|_| Block {
                to_q: gaussian(&mut rng, dm, dm, 1.0 / (dm as f64).sqrt()),
                to_k: gaussian(&mut rng, dm, dt, 1.0 / (dt as f64).sqrt()),
                to_v: gaussian(&mut rng, dm, dt, 1.0 / (dt as f64).sqrt()),
                to_out: gaussian(&mut rng, dm, dm, 0.5 / (dm as f64).sqrt()),
                ff_in: gaussian(&mut rng, dff, dm, 1.0 / (dm as f64).sqrt()),
                ff_out: gaussian(&mut rng, dm, dff, 0.5 / (dff as f64).sqrt()),
            })
            .collect();
        let latent_out = gaussian(&mut rng, c, dm, 0.5 / (dm as f64).sqrt());

        let n = config.size;
        let mut positions = Array2::zeros((n * n, dm));
        for i in 0..n {
            for j in 0..n {
                let p = i * n + j;
                for k in 0..dm / 4 {
                    let w = (k + 1) as f64 * std::f64::consts::PI / n as f64;
                    let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
                    positions[[p, 4 * k]] = (w * x).sin();
                    positions[[p, 4 * k + 1]] = (w * x).cos();
                    positions[[p, 4 * k + 2]] = (w * y).sin();
                    positions[[p, 4 * k + 3]] = (w * y).cos();
                }
            }
        }
        let mut unet_keys = vec![LATENT_IN.to_string(), LATENT_OUT.to_string()];
        for b in 0..config.blocks {
            unet_keys.extend(BLOCK_PARTS.iter().map(|p| block_key(b, p)));
        }
        Ok(Self {
            config,
            embedding,
            text_proj,
            unet: Unet {
                latent_in,
                blocks,
                latent_out,
            },
            positions,
            schedule,
            unet_keys,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn unet_keys(&self) -> Vec<&str> {
        self.unet_keys.iter().map(String::as_str).collect()
    }

    pub fn text_keys(&self) -> Vec<&str> {
        vec![TEXT_PROJ]
    }

    fn positions_count(&self) -> usize {
        self.config.size * self.config.size
    }

    /// Base-weight copy of a layer, for adapter synthesis and tests.
    pub fn weight(&self, key: &str) -> Option<Array2<f64>> {
        if key == TEXT_PROJ {
            return Some(self.text_proj.clone());
        }
        self.unet.clone().weight_mut(key).map(|w| w.clone())
    }

    pub(crate) fn patched_unet(&self, loras: &LoraSet) -> Result<Cow<'_, Unet>> {
        loras.validate()?;
        loras.check_keys(&self.unet_keys(), &self.text_keys())?;
        if loras.entries.iter().all(|(a, _)| a.deltas.is_empty()) {
            return Ok(Cow::Borrowed(&self.unet));
        }
        let mut unet = self.unet.clone();
        for key in &self.unet_keys {
            let w = unet.weight_mut(key).expect("known key");
            if let Some(p) = loras.patch(key, w, false)? {
                *w = p;
            }
        }
        Ok(Cow::Owned(unet))
    }

    /// Text embeddings `(l, d_text)` of arbitrary text through the (patched)
    /// encoder.
    pub fn embed_text(&self, text: &str, loras: &LoraSet) -> Result<Array2<f64>> {
        let tokens = self.config.tokenizer.tokenize(text)?;
        loras.validate()?;
        loras.check_keys(&self.unet_keys(), &self.text_keys())?;
        let proj = loras.patch(TEXT_PROJ, &self.text_proj, true)?;
        let proj = proj.as_ref().unwrap_or(&self.text_proj);
        let ids = tokens.ids();
        let rows = self.embedding.select(Axis(0), &ids.iter().map(|&i| i as usize).collect::<Vec<_>>());
        Ok(rows.dot(&proj.t()))
    }

    fn timestep_embedding(&self, t: usize) -> Array1<f64> {
        let d = self.config.d_model;
        Array1::from_shape_fn(d, |k| {
            let freq = 1.0 / 10000f64.powf((k / 2 * 2) as f64 / d as f64);
            let a = t as f64 * freq;
            0.5 * if k % 2 == 0 { a.sin() } else { a.cos() }
        })
    }

    fn head_slice(&self, m: usize) -> std::ops::Range<usize> {
        let dh = self.config.d_model / self.config.heads;
        m * dh..(m + 1) * dh
    }

    /// Latent `(c, h, w)` → pixel rows `(P, c)`.
    fn pixels(&self, z: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = z.dim();
        let mut out = Array2::zeros((h * w, c));
        for ((ch, i, j), v) in z.indexed_iter() {
            out[[i * w + j, ch]] = *v;
        }
        out
    }

    fn unpixels(&self, rows: &Array2<f64>) -> Array3<f64> {
        let n = self.config.size;
        Array3::from_shape_fn((self.config.channels, n, n), |(ch, i, j)| rows[[i * n + j, ch]])
    }

    pub(crate) fn forward(&self, unet: &Unet, z: &Array3<f64>, text: &Array2<f64>, timestep: usize) -> Forward {
        let dh = (self.config.d_model / self.config.heads) as f64;
        let mut h = self.pixels(z).dot(&unet.latent_in.t()) + &self.positions;
        h += &self.timestep_embedding(timestep);
        let mut caches = Vec::with_capacity(unet.blocks.len());
        for block in &unet.blocks {
            let keys = text.dot(&block.to_k.t());
            let values = text.dot(&block.to_v.t());
            let q = h.dot(&block.to_q.t());
            let mut mixed = Array2::zeros(h.dim());
            let mut attn = Vec::with_capacity(self.config.heads);
            for m in 0..self.config.heads {
                let r = self.head_slice(m);
                let mut a = q.slice(s![.., r.clone()]).dot(&keys.slice(s![.., r.clone()]).t()) / dh.sqrt();
                softmax_rows(&mut a);
                mixed.slice_mut(s![.., r.clone()]).assign(&a.dot(&values.slice(s![.., r])));
                attn.push(a);
            }
            let hb = &h + &mixed.dot(&block.to_out.t());
            let act = hb.dot(&block.ff_in.t()).mapv(f64::tanh);
            let next = &hb + &act.dot(&block.ff_out.t());
            caches.push(BlockCache {
                input: h,
                keys,
                values,
                attn,
                act,
            });
            h = next;
        }
        Forward {
            x0: h.dot(&unet.latent_out.t()),
            blocks: caches,
        }
    }

    fn records(&self, fwd: &Forward) -> Vec<AttentionRecord> {
        let heads = self.config.heads;
        fwd.blocks
            .iter()
            .enumerate()
            .map(|(b, cache)| {
                let mut map = cache.attn[0].clone();
                for a in &cache.attn[1..] {
                    map += a;
                }
                map /= heads as f64;
                AttentionRecord {
                    layer_id: b,
                    head_count: heads,
                    resolution: (self.config.size, self.config.size),
                    map,
                }
            })
            .collect()
    }

    /// `d loss / d z` given `d loss / d record.map` for every block.
    pub(crate) fn backward(&self, unet: &Unet, fwd: &Forward, map_grads: &[Array2<f64>]) -> Array3<f64> {
        let heads = self.config.heads;
        let dh = (self.config.d_model / heads) as f64;
        let mut dh_next = Array2::<f64>::zeros((self.positions_count(), self.config.d_model));
        for (b, cache) in fwd.blocks.iter().enumerate().rev() {
            let block = &unet.blocks[b];
            // next = hb + tanh(hb ff_in^T) ff_out^T
            let dact = dh_next.dot(&block.ff_out) * cache.act.mapv(|g| 1.0 - g * g);
            let dhb = &dh_next + &dact.dot(&block.ff_in);
            // hb = input + mixed to_out^T
            let dmixed = dhb.dot(&block.to_out);
            let mut dq = Array2::zeros(dhb.dim());
            for m in 0..heads {
                let r = self.head_slice(m);
                let a = &cache.attn[m];
                let mut da = dmixed.slice(s![.., r.clone()]).dot(&cache.values.slice(s![.., r.clone()]).t());
                da.scaled_add(1.0 / heads as f64, &map_grads[b]);
                let weighted = (&da * a).sum_axis(Axis(1)).insert_axis(Axis(1));
                let dlogits = a * &(&da - &weighted);
                dq.slice_mut(s![.., r.clone()])
                    .assign(&(dlogits.dot(&cache.keys.slice(s![.., r])) / dh.sqrt()));
            }
            dh_next = dhb + dq.dot(&block.to_q);
        }
        self.unpixels(&dh_next.dot(&unet.latent_in))
    }

    pub(crate) fn schedule_timestep(&self, step: usize) -> usize {
        self.schedule.timesteps[step.min(self.schedule.len() - 1)]
    }

    fn alpha_bar(&self, z: &LatentState) -> Result<(f64, usize)> {
        let (a, _) = self.schedule.coefficients(z.timestep_index)?;
        Ok((a, self.schedule.timesteps[z.timestep_index]))
    }

    fn check_latent(&self, z: &LatentState) -> Result<()> {
        let n = self.config.size;
        if z.data.dim() != (self.config.channels, n, n) {
            return Err(Error::ContractViolation(format!("latent shape {:?}", z.data.dim())));
        }
        z.check_finite()
    }

    fn check_embedding(&self, e: &PromptEmbedding) -> Result<()> {
        if e.data.ncols() != self.config.d_text || e.data.nrows() == 0 {
            return Err(Error::ContractViolation(format!("embedding shape {:?}", e.data.dim())));
        }
        Ok(())
    }
}

impl DenoiserBackend for ToyBackend {
    fn name(&self) -> &str {
        "toy"
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.config.tokenizer
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        (self.config.channels, self.config.size, self.config.size)
    }

    fn schedule(&self) -> &DdimSchedule {
        &self.schedule
    }

    fn initial_latent(&self, seed: u64) -> LatentState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_simple_fn(self.latent_shape(), || StandardNormal.sample(&mut rng));
        LatentState {
            data,
            timestep_index: 0,
        }
    }

    fn encode_prompt(&mut self, variant: &PromptVariant, loras: &LoraSet) -> Result<PromptEmbedding> {
        let data = self.embed_text(&variant.text, loras)?;
        if data.nrows() != variant.token_len {
            return Err(Error::ContractViolation(format!(
                "variant {} declares {} tokens, tokenizer produced {}",
                variant.variant_id,
                variant.token_len,
                data.nrows()
            )));
        }
        let encoder_lora = loras
            .entries
            .iter()
            .find(|(a, _)| a.text_encoder_deltas.contains_key(TEXT_PROJ))
            .map(|(a, _)| a.lora_id.clone());
        Ok(PromptEmbedding {
            data,
            variant_id: variant.variant_id,
            encoder_lora,
        })
    }

    fn denoise_step(
        &mut self,
        z: &LatentState,
        embedding: &PromptEmbedding,
        loras: &LoraSet,
        capture: bool,
    ) -> Result<StepOutput> {
        self.check_latent(z)?;
        self.check_embedding(embedding)?;
        let (a, t) = self.alpha_bar(z)?;
        let unet = self.patched_unet(loras)?;
        let fwd = self.forward(&unet, &z.data, &embedding.data, t);
        let x0 = self.unpixels(&fwd.x0);
        let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
        let noise_prediction = (&z.data - &(x0 * sa)) / sb;
        if noise_prediction.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure("non-finite noise prediction".into()));
        }
        let records = if capture { self.records(&fwd) } else { Vec::new() };
        Ok(StepOutput {
            noise_prediction,
            records,
        })
    }

    fn grad_wrt_latent(
        &mut self,
        z: &LatentState,
        branches: &[Conditioning<'_>],
        objective: &dyn AttentionObjective,
    ) -> Result<LossGrad> {
        self.check_latent(z)?;
        let (_, t) = self.alpha_bar(z)?;
        let mut passes = Vec::with_capacity(branches.len());
        for br in branches {
            self.check_embedding(br.embedding)?;
            let unet = self.patched_unet(br.loras)?;
            let fwd = self.forward(&unet, &z.data, &br.embedding.data, t);
            passes.push((unet, fwd));
        }
        let records: Vec<Vec<AttentionRecord>> = passes.iter().map(|(_, f)| self.records(f)).collect();
        let (loss, grads) = objective.evaluate(&records)?;
        check_objective_grads(&records, &grads)?;
        let mut grad = Array3::zeros(z.data.dim());
        for ((unet, fwd), g) in passes.iter().zip(&grads) {
            grad += &self.backward(unet, fwd, g);
        }
        if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure("non-finite loss or gradient".into()));
        }
        Ok(LossGrad { loss, grad })
    }

    fn decode(&self, z: &LatentState) -> Result<GrayImage> {
        let n = self.config.size as u32;
        let mean = z.data.mean_axis(Axis(0)).expect("channels > 0");
        let img = GrayImage::from_fn(n, n, |x, y| {
            let v = mean[[y as usize, x as usize]];
            Luma([((v * 0.5 + 0.5).clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        Ok(imageops::resize(
            &img,
            n * DECODE_SCALE,
            n * DECODE_SCALE,
            imageops::FilterType::Nearest,
        ))
    }
}
