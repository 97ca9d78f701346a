//! Binary masks from attention and region-wise fusion of branch latents.

use log::warn;
use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::attention::TokenMaps;
use crate::backend::LatentState;
use crate::composition::LoraId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    #[default]
    Nearest,
}

/// How pixels covered by several masks are filled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapRule {
    /// Mean of the covering branches.
    #[default]
    Average,
    /// First covering branch in binding order.
    Priority,
}

fn default_threshold() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub upsample: Upsample,
    #[serde(default)]
    pub overlap_rule: OverlapRule,
    #[serde(default = "default_true")]
    pub enabled: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            threshold: default_threshold(),
            upsample: Upsample::Nearest,
            overlap_rule: OverlapRule::Average,
            enabled: true,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threshold > 0.0 && self.threshold < 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "mask threshold must lie in (0, 1), got {}",
                self.threshold
            )))
        }
    }
}

/// `A >= tau * max(A)`.
pub fn binary_mask(a: ArrayView2<'_, f64>, tau: f64) -> Result<Array2<bool>> {
    let max = a.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if !(max > 0.0 && max.is_finite()) {
        return Err(Error::DegenerateMap);
    }
    let cut = tau * max;
    Ok(a.mapv(|v| v >= cut))
}

/// Union of the thresholded sources. A degenerate source contributes nothing.
pub fn lora_mask(sources: &[ArrayView2<'_, f64>], tau: f64) -> Result<Array2<bool>> {
    let first = sources
        .first()
        .ok_or_else(|| Error::ContractViolation("a LoRA mask needs at least one source map".into()))?;
    let mut out = Array2::from_elem(first.dim(), false);
    for s in sources {
        if s.dim() != out.dim() {
            return Err(Error::ContractViolation(format!(
                "source maps {:?} and {:?}",
                s.dim(),
                out.dim()
            )));
        }
        match binary_mask(s.view(), tau) {
            Ok(m) => Zip::from(&mut out).and(&m).for_each(|o, &v| *o |= v),
            Err(Error::DegenerateMap) => warn!("all-zero attention map; it adds no pixels to the mask"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Mean map of the given tokens, `(h, w)`.
pub fn span_map(maps: &TokenMaps, tokens: &[usize]) -> Result<Array2<f64>> {
    let (l, h, w) = maps.dim();
    if tokens.is_empty() {
        return Err(Error::ContractViolation("empty token span".into()));
    }
    let mut acc = Array2::zeros((h, w));
    for &t in tokens {
        if t >= l {
            return Err(Error::ContractViolation(format!("token {t} out of range ({l} tokens)")));
        }
        acc += &maps.index_axis(ndarray::Axis(0), t);
    }
    Ok(acc / tokens.len() as f64)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_mask(mask: &Array2<bool>, (h, w): (usize, usize)) -> Result<Array2<bool>> {
    let (mh, mw) = mask.dim();
    if mh == 0 || mw == 0 || h % mh != 0 || w % mw != 0 {
        return Err(Error::ContractViolation(format!(
            "cannot upsample {mh}x{mw} to {h}x{w} by an integer factor"
        )));
    }
    let (fy, fx) = (h / mh, w / mw);
    Ok(Array2::from_shape_fn((h, w), |(i, j)| mask[[i / fy, j / fx]]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    /// In binding order.
    pub masks: Vec<(LoraId, Array2<bool>)>,
    /// Pixels no mask covers.
    pub background: Array2<bool>,
}

impl MaskSet {
    pub fn new(masks: Vec<(LoraId, Array2<bool>)>, dim: (usize, usize)) -> Result<Self> {
        let mut background = Array2::from_elem(dim, true);
        for (id, m) in &masks {
            if m.dim() != dim {
                return Err(Error::ContractViolation(format!("mask for {id} is {:?}, expected {dim:?}", m.dim())));
            }
            Zip::from(&mut background).and(m).for_each(|b, &v| *b &= !v);
        }
        Ok(Self { masks, background })
    }

    pub fn get(&self, id: &LoraId) -> Option<&Array2<bool>> {
        self.masks.iter().find(|(l, _)| l == id).map(|(_, m)| m)
    }

    pub fn upsampled(&self, dim: (usize, usize)) -> Result<Self> {
        let masks = self
            .masks
            .iter()
            .map(|(id, m)| Ok((id.clone(), upsample_mask(m, dim)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(masks, dim)
    }
}

/// Region-wise composite: uncovered pixels from `base`, covered pixels from
/// the covering branches per `rule`. Masks must already be at latent size.
pub fn fuse_latents(
    base: &LatentState,
    branches: &[(LoraId, LatentState)],
    masks: &MaskSet,
    rule: OverlapRule,
) -> Result<LatentState> {
    let (c, h, w) = base.data.dim();
    if masks.background.dim() != (h, w) {
        return Err(Error::ContractViolation(format!(
            "masks {:?} vs latent {:?}",
            masks.background.dim(),
            (h, w)
        )));
    }
    let mut covering: Vec<(&Array2<bool>, &LatentState)> = Vec::new();
    for (id, m) in &masks.masks {
        let branch = branches
            .iter()
            .find(|(b, _)| b == id)
            .map(|(_, z)| z)
            .ok_or_else(|| Error::ContractViolation(format!("no branch latent for {id}")))?;
        if branch.data.dim() != (c, h, w) {
            return Err(Error::ContractViolation(format!(
                "branch {id} latent {:?} vs base {:?}",
                branch.data.dim(),
                (c, h, w)
            )));
        }
        covering.push((m, branch));
    }
    let mut data = base.data.clone();
    for i in 0..h {
        for j in 0..w {
            let mut hits = covering.iter().filter(|(m, _)| m[[i, j]]).map(|(_, z)| *z);
            let chosen: Vec<&LatentState> = match rule {
                OverlapRule::Priority => hits.next().into_iter().collect(),
                OverlapRule::Average => hits.collect(),
            };
            if chosen.is_empty() {
                continue;
            }
            for ch in 0..c {
                let sum: f64 = chosen.iter().map(|z| z.data[[ch, i, j]]).sum();
                data[[ch, i, j]] = sum / chosen.len() as f64;
            }
        }
    }
    Ok(LatentState {
        data,
        timestep_index: base.timestep_index,
    })
}

/// Unweighted mean of the base and all branch latents.
pub fn mean_latents(base: &LatentState, branches: &[(LoraId, LatentState)]) -> Result<LatentState> {
    let mut data = base.data.clone();
    for (id, z) in branches {
        if z.data.dim() != data.dim() {
            return Err(Error::ContractViolation(format!("branch {id} latent shape {:?}", z.data.dim())));
        }
        data += &z.data;
    }
    data /= (branches.len() + 1) as f64;
    Ok(LatentState {
        data,
        timestep_index: base.timestep_index,
    })
}
