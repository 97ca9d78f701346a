//! Prompt variants and concept groups.
//!
//! A composition request with N content LoRAs expands into N + 1 prompt
//! variants: the original prompt plus one copy per LoRA with that LoRA's
//! trigger inserted in front of its concept. Concept groups collect, for each
//! concept, the token positions across all variants whose attention maps
//! should agree with each other and disagree with every other group.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::lora::synth::Quadrant;
use crate::mask::MaskConfig;
use crate::tokenizer::{Tokenized, Tokenizer};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LoraId(pub String);

impl LoraId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LoraId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LoraId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BindingKind {
    #[default]
    Content,
    Style,
}

fn default_weight() -> f64 {
    1.0
}

fn is_default_weight(w: &f64) -> bool {
    *w == 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptBinding {
    #[serde(rename = "text")]
    pub concept_text: String,
    #[serde(rename = "lora")]
    pub lora_id: LoraId,
    #[serde(default)]
    pub kind: BindingKind,
    /// Placeholder string inserted into the prompt; defaults to the LoRA id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<String>,
    /// Weight used by the weighted-merge baseline.
    #[serde(default = "default_weight", skip_serializing_if = "is_default_weight")]
    pub weight: f64,
    /// Adapter file; when absent the toy backend synthesizes one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Spatial bias of a synthesized toy adapter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadrant: Option<Quadrant>,
}

impl ConceptBinding {
    pub fn content(concept: &str, lora: &str) -> Self {
        Self {
            concept_text: concept.to_string(),
            lora_id: LoraId::from(lora),
            kind: BindingKind::Content,
            trigger: None,
            weight: 1.0,
            path: None,
            quadrant: None,
        }
    }

    pub fn style(lora: &str) -> Self {
        Self {
            kind: BindingKind::Style,
            ..Self::content("", lora)
        }
    }

    pub fn with_quadrant(mut self, q: Quadrant) -> Self {
        self.quadrant = Some(q);
        self
    }

    pub fn trigger(&self) -> &str {
        self.trigger.as_deref().unwrap_or(self.lora_id.as_str())
    }

    pub fn is_content(&self) -> bool {
        self.kind == BindingKind::Content
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionSpec {
    #[serde(rename = "prompt")]
    pub base_prompt: String,
    #[serde(rename = "concepts")]
    pub bindings: Vec<ConceptBinding>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, rename = "guidance")]
    pub guidance_config: GuidanceConfig,
    #[serde(default, rename = "mask")]
    pub mask_config: MaskConfig,
}

impl CompositionSpec {
    pub fn new(prompt: &str, bindings: Vec<ConceptBinding>) -> Self {
        Self {
            base_prompt: prompt.to_string(),
            bindings,
            seed: 0,
            guidance_config: GuidanceConfig::default(),
            mask_config: MaskConfig::default(),
        }
    }

    pub fn content_bindings(&self) -> impl Iterator<Item = &ConceptBinding> {
        self.bindings.iter().filter(|b| b.is_content())
    }

    pub fn style_bindings(&self) -> impl Iterator<Item = &ConceptBinding> {
        self.bindings.iter().filter(|b| !b.is_content())
    }

    pub fn binding(&self, lora: &LoraId) -> Option<&ConceptBinding> {
        self.bindings.iter().find(|b| &b.lora_id == lora)
    }

    /// Parses a TOML (or, by `.json` extension, JSON) composition document.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("composition spec serializes")
    }

    /// Checks the spec invariants and returns each content binding's span in
    /// the tokenized base prompt, in binding order.
    pub fn validate(&self, tokenizer: &dyn Tokenizer) -> Result<Vec<Range<usize>>> {
        if self.content_bindings().next().is_none() {
            return Err(Error::InvalidSpec("at least one content binding is required".into()));
        }
        let mut ids = HashSet::new();
        let mut triggers = HashSet::new();
        for b in &self.bindings {
            if !ids.insert(&b.lora_id) {
                return Err(Error::InvalidSpec(format!("duplicate lora id `{}`", b.lora_id)));
            }
            let trig = tokenizer.normalize(b.trigger());
            if trig.is_empty() {
                return Err(Error::InvalidSpec(format!("empty trigger for `{}`", b.lora_id)));
            }
            if !triggers.insert(trig) {
                return Err(Error::InvalidSpec(format!("duplicate trigger `{}`", b.trigger())));
            }
            if !b.weight.is_finite() {
                return Err(Error::InvalidSpec(format!("non-finite weight for `{}`", b.lora_id)));
            }
        }
        self.guidance_config.validate(None)?;
        self.mask_config.validate()?;

        let base = tokenizer.tokenize(&self.base_prompt)?;
        let mut spans: Vec<Range<usize>> = Vec::new();
        for b in self.content_bindings() {
            let span = base
                .find_span(&tokenizer.normalize(&b.concept_text))
                .ok_or_else(|| Error::SpanNotFound {
                    concept: b.concept_text.clone(),
                    prompt: self.base_prompt.clone(),
                })?;
            if let Some(other) = spans.iter().find(|s| s.start < span.end && span.start < s.end) {
                return Err(Error::InvalidSpec(format!(
                    "concept `{}` overlaps token span {other:?}",
                    b.concept_text
                )));
            }
            spans.push(span);
        }
        Ok(spans)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptVariant {
    pub variant_id: usize,
    pub text: String,
    pub active_lora: Option<LoraId>,
    /// Concept text → token indices in this variant's tokenization.
    pub token_spans: BTreeMap<String, Vec<usize>>,
    pub trigger_span: Option<Vec<usize>>,
    /// Tokenized length, special tokens included.
    pub token_len: usize,
}

impl PromptVariant {
    pub fn concept_tokens(&self, concept: &str) -> &[usize] {
        self.token_spans.get(concept).map(Vec::as_slice).unwrap_or(&[])
    }
}

fn indices(r: Range<usize>) -> Vec<usize> {
    r.collect()
}

fn check_trigger(tokens: &Tokenized, at: usize, trigger: &[String]) -> Result<()> {
    let ok = trigger
        .iter()
        .enumerate()
        .all(|(i, t)| tokens.tokens.get(at + i).is_some_and(|tok| &tok.text == t));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!(
            "trigger `{}` does not tokenize cleanly in place",
            trigger.join(" ")
        )))
    }
}

/// Builds the original prompt plus one trigger-inserted variant per content
/// binding, in binding order.
pub fn build_variants(spec: &CompositionSpec, tokenizer: &dyn Tokenizer) -> Result<Vec<PromptVariant>> {
    let spans = spec.validate(tokenizer)?;
    let base_tokens = tokenizer.tokenize(&spec.base_prompt)?;
    let content: Vec<&ConceptBinding> = spec.content_bindings().collect();

    let base_spans: BTreeMap<String, Vec<usize>> = content
        .iter()
        .zip(&spans)
        .map(|(b, s)| (b.concept_text.clone(), indices(s.clone())))
        .collect();

    let mut variants = vec![PromptVariant {
        variant_id: 0,
        text: spec.base_prompt.clone(),
        active_lora: None,
        token_spans: base_spans,
        trigger_span: None,
        token_len: base_tokens.len(),
    }];

    for (i, (binding, span)) in content.iter().zip(&spans).enumerate() {
        let trigger = tokenizer.normalize(binding.trigger());
        let shift = trigger.len();
        let at = base_tokens
            .byte_range(span)
            .expect("concept spans cover source text")
            .start;
        let text = format!(
            "{}{} {}",
            &spec.base_prompt[..at],
            binding.trigger(),
            &spec.base_prompt[at..]
        );
        let tokens = tokenizer.tokenize(&text)?;
        check_trigger(&tokens, span.start, &trigger)?;

        let token_spans = content
            .iter()
            .zip(&spans)
            .map(|(b, s)| {
                let moved = if s.start >= span.start {
                    s.start + shift..s.end + shift
                } else {
                    s.clone()
                };
                (b.concept_text.clone(), indices(moved))
            })
            .collect();

        variants.push(PromptVariant {
            variant_id: i + 1,
            text,
            active_lora: Some(binding.lora_id.clone()),
            token_spans,
            trigger_span: Some(indices(span.start..span.start + shift)),
            token_len: tokens.len(),
        });
    }
    Ok(variants)
}

/// Style variants: the style trigger appended to the prompt tail. Ids continue
/// after `first_id`; concept spans are unchanged because the suffix comes last.
pub fn build_style_variants(
    spec: &CompositionSpec,
    tokenizer: &dyn Tokenizer,
    first_id: usize,
) -> Result<Vec<PromptVariant>> {
    let spans = spec.validate(tokenizer)?;
    let base_len = tokenizer.tokenize(&spec.base_prompt)?.len();
    let token_spans: BTreeMap<String, Vec<usize>> = spec
        .content_bindings()
        .zip(&spans)
        .map(|(b, s)| (b.concept_text.clone(), indices(s.clone())))
        .collect();

    spec.style_bindings()
        .enumerate()
        .map(|(i, b)| {
            let text = format!("{} {}", spec.base_prompt, b.trigger());
            let tokens = tokenizer.tokenize(&text)?;
            let trigger = tokenizer.normalize(b.trigger());
            // base tokens minus EOS, then the trigger
            let at = base_len - 1;
            check_trigger(&tokens, at, &trigger)?;
            Ok(PromptVariant {
                variant_id: first_id + i,
                text,
                active_lora: Some(b.lora_id.clone()),
                token_spans: token_spans.clone(),
                trigger_span: Some(indices(at..at + trigger.len())),
                token_len: tokens.len(),
            })
        })
        .collect()
}

/// Prompt with every content trigger inserted, used by the merge and switch
/// baselines.
pub fn all_triggers_prompt(spec: &CompositionSpec, tokenizer: &dyn Tokenizer) -> Result<String> {
    let spans = spec.validate(tokenizer)?;
    let base_tokens = tokenizer.tokenize(&spec.base_prompt)?;
    let mut inserts: Vec<(usize, &str)> = spec
        .content_bindings()
        .zip(&spans)
        .map(|(b, s)| (base_tokens.byte_range(s).expect("span in text").start, b.trigger()))
        .collect();
    inserts.sort_by_key(|(at, _)| *at);
    let mut out = String::new();
    let mut last = 0;
    for (at, trig) in inserts {
        out.push_str(&spec.base_prompt[last..at]);
        out.push_str(trig);
        out.push(' ');
        last = at;
    }
    out.push_str(&spec.base_prompt[last..]);
    let _ = tokenizer.tokenize(&out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptGroup {
    pub concept_text: String,
    pub lora_id: LoraId,
    /// (variant_id, token_index) pairs.
    pub members: Vec<(usize, usize)>,
}

/// One group per content binding: the concept's tokens from every variant plus
/// the trigger tokens from the concept's own LoRA-applied variant.
pub fn build_groups(variants: &[PromptVariant], spec: &CompositionSpec) -> Result<Vec<ConceptGroup>> {
    let mut seen = HashSet::new();
    let mut groups = Vec::new();
    for binding in spec.content_bindings() {
        let mut members = Vec::new();
        for v in variants {
            if v.active_lora.as_ref() == Some(&binding.lora_id) {
                for &t in v.trigger_span.iter().flatten() {
                    members.push((v.variant_id, t));
                }
            }
            for &t in v.concept_tokens(&binding.concept_text) {
                members.push((v.variant_id, t));
            }
        }
        for (vid, t) in &members {
            let v = variants
                .iter()
                .find(|v| v.variant_id == *vid)
                .expect("member variant exists");
            if *t >= v.token_len {
                return Err(Error::ContractViolation(format!(
                    "token {t} out of range for variant {vid}"
                )));
            }
            if !seen.insert((*vid, *t)) {
                return Err(Error::ContractViolation(format!(
                    "token ({vid}, {t}) claimed by two groups"
                )));
            }
        }
        groups.push(ConceptGroup {
            concept_text: binding.concept_text.clone(),
            lora_id: binding.lora_id.clone(),
            members,
        });
    }
    Ok(groups)
}

/// Tokens whose attention defines one LoRA's mask, all from that LoRA's own
/// applied variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSources {
    pub lora_id: LoraId,
    pub variant_id: usize,
    pub trigger_tokens: Vec<usize>,
    pub concept_tokens: Vec<usize>,
}

impl MaskSources {
    pub fn all(&self) -> Vec<(usize, usize)> {
        self.trigger_tokens
            .iter()
            .chain(&self.concept_tokens)
            .map(|&t| (self.variant_id, t))
            .collect()
    }
}

pub fn mask_token_sources(spec: &CompositionSpec, variants: &[PromptVariant]) -> Vec<MaskSources> {
    spec.content_bindings()
        .filter_map(|b| {
            let v = variants
                .iter()
                .find(|v| v.active_lora.as_ref() == Some(&b.lora_id))?;
            Some(MaskSources {
                lora_id: b.lora_id.clone(),
                variant_id: v.variant_id,
                trigger_tokens: v.trigger_span.clone().unwrap_or_default(),
                concept_tokens: v.concept_tokens(&b.concept_text).to_vec(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::WordTokenizer;

    fn woman_umbrella() -> CompositionSpec {
        CompositionSpec::new(
            "a woman with an umbrella",
            vec![
                ConceptBinding::content("woman", "L1"),
                ConceptBinding::content("umbrella", "L2"),
            ],
        )
    }

    #[test]
    fn three_variants_for_two_bindings() {
        let tok = WordTokenizer::default();
        let v = build_variants(&woman_umbrella(), &tok).unwrap();
        let texts: Vec<_> = v.iter().map(|v| v.text.as_str()).collect();
        assert_eq!(
            texts,
            [
                "a woman with an umbrella",
                "a L1 woman with an umbrella",
                "a woman with an L2 umbrella"
            ]
        );
        assert_eq!(v[0].active_lora, None);
        assert_eq!(v[1].trigger_span, Some(vec![2]));
        assert_eq!(v[1].concept_tokens("woman"), [3]);
        assert_eq!(v[1].concept_tokens("umbrella"), [6]);
        assert_eq!(v[2].concept_tokens("woman"), [2]);
        assert_eq!(v[2].concept_tokens("umbrella"), [6]);
        assert_eq!(v[2].trigger_span, Some(vec![5]));
    }

    #[test]
    fn single_binding() {
        let tok = WordTokenizer::default();
        let spec = CompositionSpec::new("a cat", vec![ConceptBinding::content("cat", "L1")]);
        let v = build_variants(&spec, &tok).unwrap();
        assert_eq!(v.len(), 2);
        let g = build_groups(&v, &spec).unwrap();
        assert_eq!(g.len(), 1);
        let m = mask_token_sources(&spec, &v);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].all().len(), 2);
    }

    #[test]
    fn three_bindings_enumerated() {
        let tok = WordTokenizer::default();
        let spec = CompositionSpec::new(
            "a panda with a shoe and a plant",
            vec![
                ConceptBinding::content("panda", "P"),
                ConceptBinding::content("shoe", "S"),
                ConceptBinding::content("plant", "T"),
            ],
        );
        let v = build_variants(&spec, &tok).unwrap();
        assert_eq!(v.len(), 4);
        // hand-enumerated token positions:
        // v0: [bos] a panda with a shoe and a plant [eos] -> panda 2, shoe 5, plant 8
        assert_eq!(v[0].concept_tokens("panda"), [2]);
        assert_eq!(v[0].concept_tokens("shoe"), [5]);
        assert_eq!(v[0].concept_tokens("plant"), [8]);
        // v1: a P panda ... -> trigger 2, everything after shifts by one
        assert_eq!(v[1].trigger_span, Some(vec![2]));
        assert_eq!(
            (v[1].concept_tokens("panda"), v[1].concept_tokens("shoe"), v[1].concept_tokens("plant")),
            (&[3][..], &[6][..], &[9][..])
        );
        assert_eq!(v[2].trigger_span, Some(vec![5]));
        assert_eq!(
            (v[2].concept_tokens("panda"), v[2].concept_tokens("shoe"), v[2].concept_tokens("plant")),
            (&[2][..], &[6][..], &[9][..])
        );
        assert_eq!(v[3].trigger_span, Some(vec![8]));
        assert_eq!(v[3].concept_tokens("plant"), [9]);
        let active: HashSet<_> = v.iter().map(|v| v.active_lora.clone()).collect();
        assert_eq!(active.len(), 4);

        let groups = build_groups(&v, &spec).unwrap();
        assert_eq!(groups.len(), 3);
        assert_eq!(groups[1].members, vec![(0, 5), (1, 6), (2, 5), (2, 6), (3, 5)]);
        assert!(groups.iter().all(|g| g.members.len() == 5));
    }

    #[test]
    fn groups_match_worked_example() {
        let tok = WordTokenizer::default();
        let spec = woman_umbrella();
        let v = build_variants(&spec, &tok).unwrap();
        let g = build_groups(&v, &spec).unwrap();
        // woman@v0, L1@v1, woman@v1, woman@v2
        assert_eq!(g[0].members, vec![(0, 2), (1, 2), (1, 3), (2, 2)]);
        // umbrella@v0, umbrella@v1, L2@v2, umbrella@v2
        assert_eq!(g[1].members, vec![(0, 5), (1, 6), (2, 5), (2, 6)]);
    }

    #[test]
    fn mask_sources_from_own_variant() {
        let tok = WordTokenizer::default();
        let spec = woman_umbrella();
        let v = build_variants(&spec, &tok).unwrap();
        let m = mask_token_sources(&spec, &v);
        assert_eq!(m[0].all(), vec![(1, 2), (1, 3)]);
        assert_eq!(m[1].all(), vec![(2, 5), (2, 6)]);
    }

    #[test]
    fn multi_token_concept_sources() {
        let tok = WordTokenizer::default();
        let spec = CompositionSpec::new(
            "a plushie bunny and a flower in the forest",
            vec![
                ConceptBinding::content("plushie bunny", "plushie_bunny"),
                ConceptBinding::content("flower", "flower_1"),
            ],
        );
        let v = build_variants(&spec, &tok).unwrap();
        let m = mask_token_sources(&spec, &v);
        assert_eq!(m[0].concept_tokens.len(), 2);
        assert_eq!(m[0].all().len(), 3);
        let g = build_groups(&v, &spec).unwrap();
        assert_eq!(g[0].members.len(), 2 * 3 + 1);
    }

    #[test]
    fn missing_concept() {
        let tok = WordTokenizer::default();
        let spec = CompositionSpec::new("a cat", vec![ConceptBinding::content("dog", "L1")]);
        assert!(matches!(build_variants(&spec, &tok), Err(Error::SpanNotFound { .. })));
    }

    #[test]
    fn trigger_overflow() {
        let tok = WordTokenizer {
            vocab_size: 128,
            max_len: 4,
        };
        let spec = CompositionSpec::new("a cat", vec![ConceptBinding::content("cat", "L1")]);
        assert!(matches!(
            build_variants(&spec, &tok),
            Err(Error::PromptTooLong { len: 5, max: 4 })
        ));
    }

    #[test]
    fn invalid_specs() {
        let tok = WordTokenizer::default();
        let no_content = CompositionSpec::new("a cat", vec![ConceptBinding::style("S")]);
        assert!(matches!(no_content.validate(&tok), Err(Error::InvalidSpec(_))));
        let dup = CompositionSpec::new(
            "a cat and a dog",
            vec![ConceptBinding::content("cat", "L1"), ConceptBinding::content("dog", "L1")],
        );
        assert!(matches!(dup.validate(&tok), Err(Error::InvalidSpec(_))));
        let overlap = CompositionSpec::new(
            "a black cat",
            vec![
                ConceptBinding::content("black cat", "L1"),
                ConceptBinding::content("cat", "L2"),
            ],
        );
        assert!(matches!(overlap.validate(&tok), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn style_variant_appends_trigger() {
        let tok = WordTokenizer::default();
        let mut spec = woman_umbrella();
        spec.bindings.push(ConceptBinding::style("watercolor"));
        let v = build_variants(&spec, &tok).unwrap();
        assert_eq!(v.len(), 3);
        let s = build_style_variants(&spec, &tok, v.len()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].variant_id, 3);
        assert_eq!(s[0].text, "a woman with an umbrella watercolor");
        assert_eq!(s[0].trigger_span, Some(vec![6]));
        assert_eq!(s[0].token_spans, v[0].token_spans);
        // style bindings form no group
        assert_eq!(build_groups(&v, &spec).unwrap().len(), 2);
    }

    #[test]
    fn all_triggers() {
        let tok = WordTokenizer::default();
        let p = all_triggers_prompt(&woman_umbrella(), &tok).unwrap();
        assert_eq!(p, "a L1 woman with an L2 umbrella");
    }

    #[test]
    fn config_roundtrip_and_unknown_keys() {
        let doc = r#"
prompt = "a cat and a dog"
seed = 3

[[concepts]]
text = "cat"
lora = "blackcat"
quadrant = "nw"

[[concepts]]
text = "dog"
lora = "browndog"
trigger = "sks"

[guidance]
temperature = 0.5

[mask]
threshold = 0.4
"#;
        let spec = CompositionSpec::from_toml(doc).unwrap();
        assert_eq!(spec.bindings[1].trigger(), "sks");
        assert_eq!(spec.bindings[0].quadrant, Some(Quadrant::NorthWest));
        assert_eq!(spec.mask_config.threshold, 0.4);
        let back = CompositionSpec::from_toml(&spec.to_toml()).unwrap();
        assert_eq!(back, spec);

        let bad = doc.replace("seed = 3", "seed = 3\ncolour = 1");
        assert!(matches!(CompositionSpec::from_toml(&bad), Err(Error::InvalidConfig(_))));
        let bad = doc.replace("threshold = 0.4", "threshhold = 0.4");
        assert!(CompositionSpec::from_toml(&bad).is_err());
    }
}
