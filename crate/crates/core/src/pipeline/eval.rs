//! Identity-preservation scoring: feature cosine similarity between a
//! composed image and each adapter's single-adapter reference.

use image::{imageops, GrayImage};
use serde::{Deserialize, Serialize};

use crate::composition::LoraId;
use crate::error::{Error, Result};

pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn extract(&self, image: &GrayImage) -> Result<Vec<f64>>;
}

/// Area-downsampled, mean-centered, unit-norm pixels.
#[derive(Debug, Clone, Copy)]
pub struct ToyExtractor {
    pub size: u32,
}

impl Default for ToyExtractor {
    fn default() -> Self {
        Self { size: 8 }
    }
}

impl FeatureExtractor for ToyExtractor {
    fn name(&self) -> &str {
        "toy"
    }

    fn extract(&self, image: &GrayImage) -> Result<Vec<f64>> {
        let small = imageops::resize(image, self.size, self.size, imageops::FilterType::Triangle);
        let px: Vec<f64> = small.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect();
        let mean = px.iter().sum::<f64>() / px.len() as f64;
        let centered: Vec<f64> = px.iter().map(|v| v - mean).collect();
        let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            // flat image: keep a constant direction so similarity stays defined
            let c = 1.0 / (px.len() as f64).sqrt();
            return Ok(vec![c; px.len()]);
        }
        Ok(centered.into_iter().map(|v| v / norm).collect())
    }
}

/// Placeholder for a self-supervised ViT extractor; this build carries no
/// weights, so extraction always reports unavailability.
#[derive(Debug, Clone, Copy, Default)]
pub struct DinoExtractor;

impl FeatureExtractor for DinoExtractor {
    fn name(&self) -> &str {
        "dino"
    }

    fn extract(&self, _image: &GrayImage) -> Result<Vec<f64>> {
        Err(Error::ExtractorUnavailable(
            "DINO ViT weights are not bundled with this build".into(),
        ))
    }
}

pub fn extractor_by_name(name: &str) -> Result<Box<dyn FeatureExtractor>> {
    match name {
        "toy" => Ok(Box::new(ToyExtractor::default())),
        "dino" => Ok(Box::new(DinoExtractor)),
        other => Err(Error::InvalidConfig(format!("unknown extractor `{other}` (toy, dino)"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_lora: Vec<(LoraId, f64)>,
    pub min_sim: f64,
    pub avg_sim: f64,
    pub max_sim: f64,
}

impl EvalReport {
    pub fn from_similarities(per_lora: Vec<(LoraId, f64)>) -> Result<Self> {
        if per_lora.is_empty() {
            return Err(Error::InvalidConfig("no similarities to report".into()));
        }
        let sims: Vec<f64> = per_lora.iter().map(|(_, s)| *s).collect();
        let min_sim = sims.iter().copied().fold(f64::INFINITY, f64::min);
        let max_sim = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let avg_sim = (sims.iter().sum::<f64>() / sims.len() as f64).clamp(min_sim, max_sim);
        Ok(Self {
            per_lora,
            min_sim,
            avg_sim,
            max_sim,
        })
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ContractViolation(format!("feature lengths {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Per adapter: mean cosine similarity between the image's features and the
/// features of that adapter's references.
pub fn evaluate(
    image: &GrayImage,
    references: &[(LoraId, Vec<GrayImage>)],
    extractor: &dyn FeatureExtractor,
) -> Result<EvalReport> {
    let target = extractor.extract(image)?;
    let mut per_lora = Vec::with_capacity(references.len());
    for (id, refs) in references {
        if refs.is_empty() {
            return Err(Error::InvalidConfig(format!("no reference images for `{id}`")));
        }
        let mut sum = 0.0;
        for r in refs {
            sum += cosine(&target, &extractor.extract(r)?)?;
        }
        per_lora.push((id.clone(), sum / refs.len() as f64));
    }
    EvalReport::from_similarities(per_lora)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;

    #[test]
    fn identical_reference_scores_one() {
        let img = GrayImage::from_fn(16, 16, |x, y| Luma([(x * 13 + y * 7) as u8]));
        let r = evaluate(&img, &[(LoraId::from("a"), vec![img.clone()])], &ToyExtractor::default()).unwrap();
        assert!((r.per_lora[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dino_is_unavailable() {
        let img = GrayImage::new(4, 4);
        assert!(matches!(
            evaluate(&img, &[(LoraId::from("a"), vec![img.clone()])], &DinoExtractor),
            Err(Error::ExtractorUnavailable(_))
        ));
    }
}
