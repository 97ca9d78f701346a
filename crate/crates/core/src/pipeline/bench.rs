//! Benchmark manifests: every (entry, seed, method) cell generated, scored
//! against single-adapter references, and summarized per method.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{error, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalReport, FeatureExtractor};
use super::{generate, make_backend, reference_images, resolve_adapters, Method, RunOptions};
use crate::composition::{CompositionSpec, ConceptBinding, LoraId};
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::mask::MaskConfig;

/// One prompt with its concepts and their adapters, e.g. "a cat and a dog in
/// the mountain" with concepts `[cat, dog]` and loras `[blackcat, browndog]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub prompt: String,
    pub concepts: Vec<String>,
    pub loras: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
    /// Style adapters applied to the whole image.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub styles: Vec<String>,
}

impl ManifestEntry {
    pub fn to_spec(&self, seed: u64, guidance: &GuidanceConfig, mask: &MaskConfig) -> Result<CompositionSpec> {
        if self.concepts.len() != self.loras.len() {
            return Err(Error::InvalidSpec(format!(
                "`{}`: {} concepts but {} loras",
                self.prompt,
                self.concepts.len(),
                self.loras.len()
            )));
        }
        let mut bindings: Vec<ConceptBinding> = self
            .concepts
            .iter()
            .zip(&self.loras)
            .map(|(c, l)| ConceptBinding::content(c, l))
            .collect();
        bindings.extend(self.styles.iter().map(|s| ConceptBinding::style(s)));
        let mut spec = CompositionSpec::new(&self.prompt, bindings);
        spec.seed = seed;
        spec.guidance_config = guidance.clone();
        spec.mask_config = mask.clone();
        Ok(spec)
    }

    /// File-name stem shared by this entry's cells.
    pub fn key(&self) -> String {
        let slug = |s: &str| -> String {
            s.chars()
                .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
                .collect::<String>()
                .split('-')
                .filter(|p| !p.is_empty())
                .collect::<Vec<_>>()
                .join("-")
        };
        let mut loras = self.loras.clone();
        loras.extend(self.styles.iter().cloned());
        format!("{}__{}", slug(&self.prompt), slug(&loras.join(" ")))
    }
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub entries: Vec<ManifestEntry>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub mask: MaskConfig,
}

impl Manifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::InvalidConfig("manifest seeds must be distinct".into()));
        }
        if self.methods.iter().collect::<BTreeSet<_>>().len() != self.methods.len() {
            return Err(Error::InvalidConfig("manifest methods must be distinct".into()));
        }
        let keys: BTreeSet<String> = self.entries.iter().map(ManifestEntry::key).collect();
        if keys.len() != self.entries.len() {
            return Err(Error::InvalidConfig("manifest entries must be distinct".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: String,
    pub method: Method,
    pub seed: u64,
    pub error: Option<String>,
    pub report: Option<EvalReport>,
    pub inter_group_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    pub cells: usize,
    pub failed: usize,
    pub evaluated: usize,
    /// Means over evaluated cells.
    pub min_sim: Option<f64>,
    pub avg_sim: Option<f64>,
    pub max_sim: Option<f64>,
    pub inter_group_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub cells: Vec<CellResult>,
    pub rows: Vec<MethodRow>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl BenchReport {
    fn summarize(methods: &[Method], cells: Vec<CellResult>) -> Self {
        let rows = methods
            .iter()
            .map(|&m| {
                let mine: Vec<&CellResult> = cells.iter().filter(|c| c.method == m).collect();
                let reports: Vec<&EvalReport> = mine.iter().filter_map(|c| c.report.as_ref()).collect();
                MethodRow {
                    method: m,
                    cells: mine.len(),
                    failed: mine.iter().filter(|c| c.error.is_some()).count(),
                    evaluated: reports.len(),
                    min_sim: mean(reports.iter().map(|r| r.min_sim)),
                    avg_sim: mean(reports.iter().map(|r| r.avg_sim)),
                    max_sim: mean(reports.iter().map(|r| r.max_sim)),
                    inter_group_iou: mean(mine.iter().filter_map(|c| c.inter_group_iou)),
                }
            })
            .collect();
        Self { cells, rows }
    }

    /// One row per method: Min/Avg/Max similarity and attention overlap.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("method,cells,failed,evaluated,min_sim,avg_sim,max_sim,inter_group_iou\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.method,
                r.cells,
                r.failed,
                r.evaluated,
                fmt_opt(r.min_sim),
                fmt_opt(r.avg_sim),
                fmt_opt(r.max_sim),
                fmt_opt(r.inter_group_iou)
            );
        }
        out
    }

    pub fn cells_csv(&self) -> String {
        let mut out = String::from("key,method,seed,status,min_sim,avg_sim,max_sim,inter_group_iou\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                c.key,
                c.method,
                c.seed,
                if c.error.is_some() { "failed" } else { "ok" },
                fmt_opt(c.report.as_ref().map(|r| r.min_sim)),
                fmt_opt(c.report.as_ref().map(|r| r.avg_sim)),
                fmt_opt(c.report.as_ref().map(|r| r.max_sim)),
                fmt_opt(c.inter_group_iou)
            );
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub backend: String,
    pub steps: usize,
    pub out_dir: PathBuf,
}

fn cell_stem(key: &str, method: Method, seed: u64) -> String {
    format!("{key}__{method}__seed{seed}")
}

/// Runs all methods for one (entry, seed); references are shared.
fn run_pair(
    entry: &ManifestEntry,
    seed: u64,
    manifest: &Manifest,
    opts: &BenchOptions,
    extractor: Option<&dyn FeatureExtractor>,
) -> Vec<CellResult> {
    let key = entry.key();
    let fail = |m: Method, e: &Error| CellResult {
        key: key.clone(),
        method: m,
        seed,
        error: Some(e.to_string()),
        report: None,
        inter_group_iou: None,
    };
    let setup = || -> Result<_> {
        let spec = entry.to_spec(seed, &manifest.guidance, &manifest.mask)?;
        let mut backend = make_backend(&opts.backend, opts.steps)?;
        let (adapters, info) = resolve_adapters(&spec, None, Some(&backend))?;
        let refs = match extractor {
            Some(_) => Some(reference_images(&mut backend, &spec, &adapters)?),
            None => None,
        };
        Ok((spec, backend, adapters, info, refs))
    };
    let (spec, mut backend, adapters, info, refs) = match setup() {
        Ok(s) => s,
        Err(e) => {
            error!("{key} seed {seed}: {e}");
            return manifest.methods.iter().map(|&m| fail(m, &e)).collect();
        }
    };
    let refs: Option<Vec<(LoraId, Vec<image::GrayImage>)>> =
        refs.map(|r| r.into_iter().map(|(id, img)| (id, vec![img])).collect());
    manifest
        .methods
        .iter()
        .map(|&method| {
            let mut run = || -> Result<CellResult> {
                let g = generate(&mut backend, &spec, method, &adapters, &info, &RunOptions::default())?;
                g.save(&opts.out_dir.join("cells"), &cell_stem(&key, method, seed))?;
                let report = match (extractor, &refs) {
                    (Some(x), Some(r)) => match evaluate(&g.image, r, x) {
                        Ok(rep) => Some(rep),
                        Err(Error::ExtractorUnavailable(msg)) => {
                            warn!("evaluation skipped: {msg}");
                            None
                        }
                        Err(e) => return Err(e),
                    },
                    _ => None,
                };
                Ok(CellResult {
                    key: key.clone(),
                    method,
                    seed,
                    error: None,
                    report,
                    inter_group_iou: g.metadata.mean_inter_group_iou(),
                })
            };
            run().unwrap_or_else(|e| {
                error!("{key} {method} seed {seed}: {e}");
                fail(method, &e)
            })
        })
        .collect()
}

/// Runs every cell (in parallel), writes per-cell artifacts under
/// `out_dir/cells`, and `table.csv` / `cells.csv` summaries.
pub fn run_benchmark(
    manifest: &Manifest,
    opts: &BenchOptions,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<BenchReport> {
    manifest.validate()?;
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let mut pairs: Vec<(&ManifestEntry, u64)> = manifest
        .entries
        .iter()
        .flat_map(|e| manifest.seeds.iter().map(move |&s| (e, s)))
        .collect();
    pairs.sort_by_key(|(e, s)| (e.key(), *s));
    let cells: Vec<CellResult> = pairs
        .par_iter()
        .map(|(entry, seed)| run_pair(entry, *seed, manifest, opts, extractor))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let report = BenchReport::summarize(&manifest.methods, cells);
    for (name, body) in [("table.csv", report.table_csv()), ("cells.csv", report.cells_csv())] {
        let path = opts.out_dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parsing_and_keys() {
        let m = Manifest::from_toml(
            r#"
seeds = [1, 2]
methods = ["clora", "merge"]

[[entries]]
prompt = "A cat and a dog in the mountain"
concepts = ["cat", "dog"]
loras = ["blackcat", "browndog"]
scene = "mountain"
"#,
        )
        .unwrap();
        assert_eq!(m.entries[0].key(), "a-cat-and-a-dog-in-the-mountain__blackcat-browndog");
        assert_eq!(m.methods, vec![Method::Clora, Method::Merge]);
        assert!(Manifest::from_toml("seeds = [1, 1]").is_err());
        let empty = Manifest::from_toml("").unwrap();
        assert!(empty.entries.is_empty());
        assert_eq!(empty.seeds.len(), 10);
    }

    #[test]
    fn mismatched_entry() {
        let e = ManifestEntry {
            prompt: "a cat".into(),
            concepts: vec!["cat".into()],
            loras: vec![],
            scene: None,
            styles: vec![],
        };
        assert!(e.to_spec(0, &GuidanceConfig::default(), &MaskConfig::default()).is_err());
    }
}
