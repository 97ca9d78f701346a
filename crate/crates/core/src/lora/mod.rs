//! Low-rank adapters: application to base weights and weighted merging.
//!
//! A layer delta is `(alpha / rank) * up * down`; applying it with a scale
//! adds `scale * (alpha / rank) * up * down` to the base weight.

pub mod io;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use ndarray::{concatenate, Array2, Axis};

use crate::composition::LoraId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayerDelta {
    pub layer_key: String,
    /// `rank x d_in`
    pub down: Array2<f64>,
    /// `d_out x rank`
    pub up: Array2<f64>,
    pub alpha: f64,
}

impl LoraLayerDelta {
    pub fn new(layer_key: impl Into<String>, down: Array2<f64>, up: Array2<f64>, alpha: f64) -> Result<Self> {
        let layer_key = layer_key.into();
        let rank = down.nrows();
        if rank == 0 {
            return Err(Error::AdapterMismatch(format!("{layer_key}: rank must be >= 1")));
        }
        if up.ncols() != rank {
            return Err(Error::AdapterMismatch(format!(
                "{layer_key}: up is {:?} but down has rank {rank}",
                up.dim()
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::AdapterMismatch(format!("{layer_key}: alpha must be > 0, got {alpha}")));
        }
        Ok(Self {
            layer_key,
            down,
            up,
            alpha,
        })
    }

    pub fn rank(&self) -> usize {
        self.down.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.down.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.up.nrows()
    }

    /// `scale * (alpha / rank) * up * down`, accumulated over rank components
    /// in index order.
    pub fn delta_matrix(&self, scale: f64) -> Array2<f64> {
        let factor = scale * (self.alpha / self.rank() as f64);
        let up = self.up.mapv(|v| factor * v);
        let mut out = Array2::zeros((self.d_out(), self.d_in()));
        for ((a, b), o) in out.indexed_iter_mut() {
            let mut acc = 0.0;
            for k in 0..self.rank() {
                acc += up[[a, k]] * self.down[[k, b]];
            }
            *o = acc;
        }
        out
    }
}

pub fn apply_delta(base: &Array2<f64>, delta: &LoraLayerDelta, scale: f64) -> Result<Array2<f64>> {
    if base.dim() != (delta.d_out(), delta.d_in()) {
        return Err(Error::AdapterMismatch(format!(
            "{}: base weight is {:?}, delta is {}x{}",
            delta.layer_key,
            base.dim(),
            delta.d_out(),
            delta.d_in()
        )));
    }
    Ok(base + &delta.delta_matrix(scale))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub lora_id: LoraId,
    /// Denoiser layer deltas.
    pub deltas: BTreeMap<String, LoraLayerDelta>,
    pub text_encoder_deltas: BTreeMap<String, LoraLayerDelta>,
    pub trigger: String,
}

impl LoraAdapter {
    pub fn new(lora_id: LoraId, trigger: impl Into<String>) -> Self {
        Self {
            lora_id,
            deltas: BTreeMap::new(),
            text_encoder_deltas: BTreeMap::new(),
            trigger: trigger.into(),
        }
    }

    pub fn with_delta(mut self, delta: LoraLayerDelta) -> Self {
        self.deltas.insert(delta.layer_key.clone(), delta);
        self
    }

    pub fn with_text_delta(mut self, delta: LoraLayerDelta) -> Self {
        self.text_encoder_deltas.insert(delta.layer_key.clone(), delta);
        self
    }
}

/// Adapters with blend weights. An empty set is the base model.
#[derive(Debug, Clone, Default)]
pub struct LoraSet {
    pub entries: Vec<(Arc<LoraAdapter>, f64)>,
}

impl LoraSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn single(adapter: Arc<LoraAdapter>) -> Self {
        Self {
            entries: vec![(adapter, 1.0)],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        match self.entries.iter().find(|(_, w)| !w.is_finite()) {
            Some((a, w)) => Err(Error::AdapterMismatch(format!("{}: non-finite weight {w}", a.lora_id))),
            None => Ok(()),
        }
    }

    /// Patches one named weight with every adapter that targets it.
    pub fn patch(&self, key: &str, base: &Array2<f64>, text_encoder: bool) -> Result<Option<Array2<f64>>> {
        let mut patched: Option<Array2<f64>> = None;
        for (adapter, w) in &self.entries {
            let deltas = if text_encoder {
                &adapter.text_encoder_deltas
            } else {
                &adapter.deltas
            };
            if let Some(d) = deltas.get(key) {
                let next = apply_delta(patched.as_ref().unwrap_or(base), d, *w)?;
                patched = Some(next);
            }
        }
        Ok(patched)
    }

    /// Fails with `AdapterMismatch` if any adapter names a layer outside `keys`.
    pub fn check_keys(&self, unet_keys: &[&str], text_keys: &[&str]) -> Result<()> {
        for (a, _) in &self.entries {
            for (map, known, what) in [
                (&a.deltas, unet_keys, "denoiser"),
                (&a.text_encoder_deltas, text_keys, "text encoder"),
            ] {
                if let Some(k) = map.keys().find(|k| !known.contains(&k.as_str())) {
                    return Err(Error::AdapterMismatch(format!(
                        "{}: {what} layer `{k}` not in backbone",
                        a.lora_id
                    )));
                }
            }
        }
        Ok(())
    }
}

fn stack(key: &str, parts: &[(&LoraLayerDelta, f64)]) -> Result<LoraLayerDelta> {
    let (d_out, d_in) = (parts[0].0.d_out(), parts[0].0.d_in());
    if let Some((d, _)) = parts.iter().find(|(d, _)| (d.d_out(), d.d_in()) != (d_out, d_in)) {
        return Err(Error::AdapterMismatch(format!(
            "{key}: cannot merge {}x{} with {d_out}x{d_in}",
            d.d_out(),
            d.d_in()
        )));
    }
    let downs: Vec<_> = parts.iter().map(|(d, _)| d.down.view()).collect();
    let ups: Vec<Array2<f64>> = parts
        .iter()
        .map(|(d, w)| {
            let fold = w * (d.alpha / d.rank() as f64);
            d.up.mapv(|v| fold * v)
        })
        .collect();
    let ups: Vec<_> = ups.iter().map(|u| u.view()).collect();
    let down = concatenate(Axis(0), &downs).expect("matching d_in");
    let up = concatenate(Axis(1), &ups).expect("matching d_out");
    let rank = down.nrows() as f64;
    LoraLayerDelta::new(key, down, up, rank)
}

fn merge_maps<'a>(
    maps: impl Iterator<Item = (&'a BTreeMap<String, LoraLayerDelta>, f64)> + Clone,
) -> Result<BTreeMap<String, LoraLayerDelta>> {
    let keys: BTreeSet<&String> = maps.clone().flat_map(|(m, _)| m.keys()).collect();
    keys.into_iter()
        .map(|key| {
            let parts: Vec<_> = maps.clone().filter_map(|(m, w)| m.get(key).map(|d| (d, w))).collect();
            Ok((key.clone(), stack(key, &parts)?))
        })
        .collect()
}

/// Merges a weighted set into one adapter by stacking ranks, with each
/// weight and `alpha / rank` folded into the up matrices. Layers an adapter
/// does not cover contribute nothing.
pub fn weighted_merge(set: &LoraSet) -> Result<LoraAdapter> {
    set.validate()?;
    let id = set
        .entries
        .iter()
        .map(|(a, _)| a.lora_id.as_str())
        .collect::<Vec<_>>()
        .join("+");
    let trigger = set
        .entries
        .iter()
        .map(|(a, _)| a.trigger.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    Ok(LoraAdapter {
        lora_id: LoraId(format!("merge({id})")),
        deltas: merge_maps(set.entries.iter().map(|(a, w)| (&a.deltas, *w)))?,
        text_encoder_deltas: merge_maps(set.entries.iter().map(|(a, w)| (&a.text_encoder_deltas, *w)))?,
        trigger,
    })
}
