//! End-to-end generation: the composed method, the baselines, and run
//! metadata.

pub mod bench;
pub mod debug;
pub mod eval;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use image::{GrayImage, ImageFormat};
use log::{debug, info};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::attention::{gather_groups, infonce_loss, inter_group_iou, reduce_maps, TokenMaps, MAP_RESOLUTION};
use crate::backend::toy::ToyBackend;
use crate::backend::{sampler_step, Conditioning, DenoiserBackend, LatentState, PromptEmbedding};
use crate::composition::{
    all_triggers_prompt, build_groups, build_style_variants, build_variants, mask_token_sources, CompositionSpec,
    ConceptGroup, LoraId, PromptVariant,
};
use crate::error::{Error, Result};
use crate::guidance::{optimize_latent, GuidanceConfig, GuidanceTrace};
use crate::lora::io::load_adapter;
use crate::lora::synth::{synth_toy_adapter, Quadrant, ToyAdapterSpec};
use crate::lora::{weighted_merge, LoraAdapter, LoraSet};
use crate::mask::{fuse_latents, lora_mask, span_map, MaskSet};
use debug::{AttnLog, MaskDump};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Clora,
    Merge,
    Composite,
    Switch,
}

impl Method {
    pub const ALL: [Method; 4] = [Self::Clora, Self::Merge, Self::Composite, Self::Switch];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Clora => "clora",
            Self::Merge => "merge",
            Self::Composite => "composite",
            Self::Switch => "switch",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}` (clora, merge, composite, switch)")))
    }
}

pub type Adapters = BTreeMap<LoraId, Arc<LoraAdapter>>;

/// Seed for synthesizing an adapter, stable across runs and binding order.
pub fn adapter_seed(id: &LoraId) -> u64 {
    id.as_str()
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterInfo {
    pub lora_id: LoraId,
    /// Adapter file, or `None` when synthesized for the toy backend.
    pub path: Option<PathBuf>,
    pub quadrant: Option<Quadrant>,
}

/// Loads every binding's adapter file (relative paths resolve against
/// `base_dir`) or, without a path, synthesizes a toy adapter.
pub fn resolve_adapters(
    spec: &CompositionSpec,
    base_dir: Option<&Path>,
    toy: Option<&ToyBackend>,
) -> Result<(Adapters, Vec<AdapterInfo>)> {
    let mut adapters = Adapters::new();
    let mut info = Vec::new();
    let mut content_index = 0;
    for b in &spec.bindings {
        let (adapter, path, quadrant) = if let Some(p) = &b.path {
            let full = match base_dir {
                Some(d) if p.is_relative() => d.join(p),
                _ => p.clone(),
            };
            let mut a = load_adapter(&full)?;
            a.lora_id = b.lora_id.clone();
            (a, Some(p.clone()), None)
        } else {
            let toy = toy.ok_or_else(|| {
                Error::InvalidSpec(format!("`{}` has no adapter path and the backend cannot synthesize one", b.lora_id))
            })?;
            let (tspec, q) = if b.is_content() {
                let q = b.quadrant.unwrap_or_else(|| Quadrant::nth(content_index));
                let mut s = ToyAdapterSpec::content(b.lora_id.as_str(), &b.concept_text, q);
                s.trigger = b.trigger().to_string();
                (s, Some(q))
            } else {
                let mut s = ToyAdapterSpec::style(b.lora_id.as_str());
                s.trigger = b.trigger().to_string();
                (s, None)
            };
            (synth_toy_adapter(adapter_seed(&b.lora_id), &tspec, toy)?, None, q)
        };
        if b.is_content() {
            content_index += 1;
        }
        info.push(AdapterInfo {
            lora_id: b.lora_id.clone(),
            path,
            quadrant,
        });
        adapters.insert(b.lora_id.clone(), Arc::new(adapter));
    }
    Ok((adapters, info))
}

fn adapter<'a>(adapters: &'a Adapters, id: &LoraId) -> Result<&'a Arc<LoraAdapter>> {
    adapters
        .get(id)
        .ok_or_else(|| Error::AdapterMismatch(format!("no adapter loaded for `{id}`")))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// JSON-lines dump of per-step token maps and group IoU.
    pub debug_attn: Option<PathBuf>,
    /// Directory for per-step mask PNGs.
    pub debug_masks: Option<PathBuf>,
    /// Never call the guidance module, as if it were absent.
    pub bypass_guidance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub version: String,
    pub backend: String,
    pub method: Method,
    pub steps: usize,
    pub seed: u64,
    pub spec: CompositionSpec,
    pub adapters: Vec<AdapterInfo>,
    pub variants: Vec<PromptVariant>,
    pub style_variants: Vec<PromptVariant>,
    pub groups: Vec<ConceptGroup>,
    pub trace: GuidanceTrace,
    /// Per step, for methods that run the prompt variants.
    pub inter_group_iou: Vec<f64>,
}

impl RunMetadata {
    pub fn mean_inter_group_iou(&self) -> Option<f64> {
        (!self.inter_group_iou.is_empty())
            .then(|| self.inter_group_iou.iter().sum::<f64>() / self.inter_group_iou.len() as f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metadata serializes")
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub struct Generation {
    pub latent: LatentState,
    pub image: GrayImage,
    pub metadata: RunMetadata,
}

pub fn png_bytes(image: &GrayImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    image.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

impl Generation {
    /// Writes `<stem>.png` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let png = dir.join(format!("{stem}.png"));
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&png, png_bytes(&self.image)?).map_err(|e| Error::io(&png, e))?;
        std::fs::write(&json, self.metadata.to_json()).map_err(|e| Error::io(&json, e))?;
        Ok((png, json))
    }
}

struct Branch {
    variant_id: usize,
    lora: Option<LoraId>,
    loras: LoraSet,
    embedding: PromptEmbedding,
}

fn branch(backend: &mut dyn DenoiserBackend, variant: &PromptVariant, adapters: &Adapters) -> Result<Branch> {
    let loras = match &variant.active_lora {
        Some(id) => LoraSet::single(adapter(adapters, id)?.clone()),
        None => LoraSet::empty(),
    };
    let embedding = backend.encode_prompt(variant, &loras)?;
    Ok(Branch {
        variant_id: variant.variant_id,
        lora: variant.active_lora.clone(),
        loras,
        embedding,
    })
}

/// A variant with no concept bookkeeping, for single-branch sampling.
pub fn plain_variant(backend: &dyn DenoiserBackend, text: &str) -> Result<PromptVariant> {
    Ok(PromptVariant {
        variant_id: 0,
        text: text.to_string(),
        active_lora: None,
        token_spans: BTreeMap::new(),
        trigger_span: None,
        token_len: backend.tokenizer().tokenize(text)?.len(),
    })
}

/// Prompt with every trigger inserted (style triggers at the tail).
pub fn merged_prompt(spec: &CompositionSpec, backend: &dyn DenoiserBackend) -> Result<String> {
    let mut text = all_triggers_prompt(spec, backend.tokenizer())?;
    for s in spec.style_bindings() {
        text.push(' ');
        text.push_str(s.trigger());
    }
    backend.tokenizer().tokenize(&text)?;
    Ok(text)
}

/// Samples one prompt, cycling through `conds` step by step.
fn sample_cycle(
    backend: &mut dyn DenoiserBackend,
    seed: u64,
    conds: &[(PromptEmbedding, LoraSet)],
) -> Result<LatentState> {
    let total = backend.schedule().len();
    let mut z = backend.initial_latent(seed);
    for step in 0..total {
        let (emb, loras) = &conds[step % conds.len()];
        let out = backend.denoise_step(&z, emb, loras, false)?;
        z = sampler_step(&z, &out.noise_prediction, backend.schedule())?;
    }
    Ok(z)
}

/// Plain sampling of one prompt under one adapter set.
pub fn sample_single(backend: &mut dyn DenoiserBackend, text: &str, loras: &LoraSet, seed: u64) -> Result<LatentState> {
    let variant = plain_variant(backend, text)?;
    let emb = backend.encode_prompt(&variant, loras)?;
    sample_cycle(backend, seed, &[(emb, loras.clone())])
}

/// One image per binding from its adapter alone, on its own prompt variant.
pub fn reference_images(
    backend: &mut dyn DenoiserBackend,
    spec: &CompositionSpec,
    adapters: &Adapters,
) -> Result<Vec<(LoraId, GrayImage)>> {
    let tok = backend.tokenizer();
    let variants = build_variants(spec, tok)?;
    let styles = build_style_variants(spec, tok, variants.len())?;
    let mut out = Vec::new();
    for v in variants.iter().skip(1).chain(&styles) {
        let id = v.active_lora.clone().expect("trigger variants carry their adapter");
        let loras = LoraSet::single(adapter(adapters, &id)?.clone());
        let z = sample_single(backend, &v.text, &loras, spec.seed)?;
        out.push((id, backend.decode(&z)?));
    }
    Ok(out)
}

fn mean_noise(preds: &[Array3<f64>]) -> Array3<f64> {
    let mut sum = preds[0].clone();
    for p in &preds[1..] {
        sum += p;
    }
    sum / preds.len() as f64
}

struct BranchRun {
    latent: LatentState,
    variants: Vec<PromptVariant>,
    styles: Vec<PromptVariant>,
    groups: Vec<ConceptGroup>,
    trace: GuidanceTrace,
    iou: Vec<f64>,
}

/// Runs every prompt variant as its own branch on one shared latent.
/// With `guidance`, the latent is optimized first each step; with
/// `masking`, branch latents are fused through attention masks, otherwise
/// the branches' noise predictions are averaged.
fn run_branches(
    backend: &mut dyn DenoiserBackend,
    spec: &CompositionSpec,
    adapters: &Adapters,
    guidance: Option<&GuidanceConfig>,
    masking: bool,
    opts: &RunOptions,
) -> Result<BranchRun> {
    let tok = backend.tokenizer();
    let variants = build_variants(spec, tok)?;
    let styles = build_style_variants(spec, tok, variants.len())?;
    let groups = build_groups(&variants, spec)?;
    let sources = mask_token_sources(spec, &variants);
    let total = backend.schedule().len();
    if let Some(cfg) = guidance {
        cfg.validate(Some(total))?;
    }
    let tokens: BTreeMap<usize, Vec<String>> = variants
        .iter()
        .map(|v| Ok((v.variant_id, tok.tokenize(&v.text)?.tokens.into_iter().map(|t| t.text).collect())))
        .collect::<Result<_>>()?;
    let mut attn_log = opts.debug_attn.as_deref().map(AttnLog::create).transpose()?;
    let mask_dump = opts.debug_masks.as_deref().map(MaskDump::create).transpose()?;

    let mut branches = Vec::new();
    for v in variants.iter().chain(&styles) {
        branches.push(branch(backend, v, adapters)?);
    }
    let n_content = variants.len();
    let (_, lh, lw) = backend.latent_shape();
    let mut trace = GuidanceTrace::default();
    let mut iou = Vec::with_capacity(total);
    let mut z = backend.initial_latent(spec.seed);

    for step in 0..total {
        if let Some(cfg) = guidance {
            let conds: Vec<Conditioning<'_>> = branches[..n_content]
                .iter()
                .map(|b| Conditioning {
                    embedding: &b.embedding,
                    loras: &b.loras,
                })
                .collect();
            let (next, st) = optimize_latent(backend, &z, &conds, &groups, cfg, total)?;
            z = next;
            trace.steps.push(st);
        }

        let mut outs = Vec::with_capacity(branches.len());
        for (i, b) in branches.iter().enumerate() {
            outs.push(backend.denoise_step(&z, &b.embedding, &b.loras, i < n_content)?);
        }
        let mut maps: BTreeMap<usize, TokenMaps> = BTreeMap::new();
        for (b, out) in branches[..n_content].iter().zip(&outs) {
            maps.insert(b.variant_id, reduce_maps(&out.records)?);
        }
        let step_iou = inter_group_iou(&maps, &groups, spec.mask_config.threshold)?;
        iou.push(step_iou);
        if let (Some(cfg), Some(st)) = (guidance, trace.steps.last_mut()) {
            if !st.losses.is_empty() {
                st.loss_after = Some(infonce_loss(&gather_groups(&maps, &groups)?, cfg.temperature)?);
            }
        }
        if let Some(log) = attn_log.as_mut() {
            log.write_step(step, &maps, &tokens, step_iou)?;
        }
        debug!("step {step}: inter-group IoU {step_iou:.4}");

        if masking {
            let mut latents = Vec::with_capacity(branches.len());
            for out in &outs {
                latents.push(sampler_step(&z, &out.noise_prediction, backend.schedule())?);
            }
            let mut masks = Vec::new();
            for s in &sources {
                let m = &maps[&s.variant_id];
                let mut src = Vec::new();
                for span in [&s.trigger_tokens, &s.concept_tokens] {
                    if !span.is_empty() {
                        src.push(span_map(m, span)?);
                    }
                }
                let views: Vec<_> = src.iter().map(|a| a.view()).collect();
                masks.push((s.lora_id.clone(), lora_mask(&views, spec.mask_config.threshold)?));
            }
            let mask_set = MaskSet::new(masks, (MAP_RESOLUTION, MAP_RESOLUTION))?;
            if let Some(d) = &mask_dump {
                d.write_step(step, &mask_set)?;
            }
            let mask_set = mask_set.upsampled((lh, lw))?;
            let background = if styles.is_empty() {
                latents[0].clone()
            } else {
                let style_latents: Vec<Array3<f64>> = latents[n_content..].iter().map(|l| l.data.clone()).collect();
                LatentState {
                    data: mean_noise(&style_latents),
                    timestep_index: latents[0].timestep_index,
                }
            };
            let content: Vec<(LoraId, LatentState)> = branches[..n_content]
                .iter()
                .zip(&latents)
                .filter_map(|(b, l)| b.lora.clone().map(|id| (id, l.clone())))
                .collect();
            z = fuse_latents(&background, &content, &mask_set, spec.mask_config.overlap_rule)?;
        } else {
            let preds: Vec<Array3<f64>> = outs.into_iter().map(|o| o.noise_prediction).collect();
            z = sampler_step(&z, &mean_noise(&preds), backend.schedule())?;
        }
    }
    Ok(BranchRun {
        latent: z,
        variants,
        styles,
        groups,
        trace,
        iou,
    })
}

pub fn generate(
    backend: &mut dyn DenoiserBackend,
    spec: &CompositionSpec,
    method: Method,
    adapters: &Adapters,
    adapter_info: &[AdapterInfo],
    opts: &RunOptions,
) -> Result<Generation> {
    spec.validate(backend.tokenizer())?;
    info!("{method}: `{}` seed {} on {}", spec.base_prompt, spec.seed, backend.name());
    let (latent, variants, styles, groups, trace, iou) = match method {
        Method::Clora | Method::Composite => {
            let (guidance, masking) = if method == Method::Clora {
                let g = (!opts.bypass_guidance).then_some(&spec.guidance_config);
                (g, spec.mask_config.enabled)
            } else {
                (None, false)
            };
            let run = run_branches(backend, spec, adapters, guidance, masking, opts)?;
            (run.latent, run.variants, run.styles, run.groups, run.trace, run.iou)
        }
        Method::Merge | Method::Switch => {
            let text = merged_prompt(spec, backend)?;
            let variant = plain_variant(backend, &text)?;
            let sets: Vec<LoraSet> = if method == Method::Merge {
                let set = LoraSet {
                    entries: spec
                        .bindings
                        .iter()
                        .map(|b| Ok((adapter(adapters, &b.lora_id)?.clone(), b.weight)))
                        .collect::<Result<_>>()?,
                };
                vec![LoraSet::single(Arc::new(weighted_merge(&set)?))]
            } else {
                spec.bindings
                    .iter()
                    .map(|b| Ok(LoraSet::single(adapter(adapters, &b.lora_id)?.clone())))
                    .collect::<Result<_>>()?
            };
            let mut conds = Vec::new();
            for s in sets {
                conds.push((backend.encode_prompt(&variant, &s)?, s));
            }
            let z = sample_cycle(backend, spec.seed, &conds)?;
            (z, vec![variant], Vec::new(), Vec::new(), GuidanceTrace::default(), Vec::new())
        }
    };
    let image = backend.decode(&latent)?;
    let metadata = RunMetadata {
        version: env!("CARGO_PKG_VERSION").to_string(),
        backend: backend.name().to_string(),
        method,
        steps: backend.schedule().len(),
        seed: spec.seed,
        spec: spec.clone(),
        adapters: adapter_info.to_vec(),
        variants,
        style_variants: styles,
        groups,
        trace,
        inter_group_iou: iou,
    };
    Ok(Generation {
        latent,
        image,
        metadata,
    })
}

/// Builds the named backend. Only `toy` is available in this build.
pub fn make_backend(name: &str, steps: usize) -> Result<ToyBackend> {
    match name {
        "toy" => ToyBackend::new(crate::backend::toy::ToyConfig::default().with_steps(steps)),
        "sd15" => Err(Error::BackendUnavailable(
            "sd15 needs Stable Diffusion v1.5 weights and a GPU runtime, which this build does not include".into(),
        )),
        other => Err(Error::BackendUnavailable(format!("unknown backend `{other}`"))),
    }
}

/// Reruns a generation from its metadata file alone. Adapter paths resolve
/// against `base_dir`.
pub fn regenerate(metadata: &RunMetadata, base_dir: Option<&Path>) -> Result<Generation> {
    let mut backend = make_backend(&metadata.backend, metadata.steps)?;
    let (adapters, info) = resolve_adapters(&metadata.spec, base_dir, Some(&backend))?;
    generate(
        &mut backend,
        &metadata.spec,
        metadata.method,
        &adapters,
        &info,
        &RunOptions::default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composition::ConceptBinding;

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("lora".parse::<Method>().is_err());
    }

    #[test]
    fn seeds_are_stable() {
        assert_eq!(adapter_seed(&LoraId::from("a")), adapter_seed(&LoraId::from("a")));
        assert_ne!(adapter_seed(&LoraId::from("a")), adapter_seed(&LoraId::from("b")));
    }

    #[test]
    fn merged_prompt_appends_styles() {
        let b = make_backend("toy", 10).unwrap();
        let spec = CompositionSpec::new(
            "a cat and a dog",
            vec![
                ConceptBinding::content("cat", "c1"),
                ConceptBinding::content("dog", "d1"),
                ConceptBinding::style("ink"),
            ],
        );
        assert_eq!(merged_prompt(&spec, &b).unwrap(), "a c1 cat and a d1 dog ink");
        assert!(matches!(make_backend("sd15", 50), Err(Error::BackendUnavailable(_))));
    }
}
