//! Adapter files in the common safetensors layout.
//!
//! | file key                                 | meaning                     |
//! |------------------------------------------|-----------------------------|
//! | `lora_unet_<layer>.lora_down.weight`     | denoiser down, `r x d_in`   |
//! | `lora_unet_<layer>.lora_up.weight`       | denoiser up, `d_out x r`    |
//! | `lora_unet_<layer>.alpha`                | scalar alpha (optional)     |
//! | `lora_te_<layer>.{lora_down,lora_up}...` | same, for the text encoder  |
//!
//! `<layer>` is the backbone's layer key verbatim. Conv-style down/up tensors
//! with trailing unit dimensions (`r x d_in x 1 x 1`) are accepted. The
//! trigger word, when present, is stored in the `ss_trigger_word` metadata
//! entry. Tensors are written as f32.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use log::warn;
use ndarray::Array2;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::{LoraAdapter, LoraLayerDelta};
use crate::composition::LoraId;
use crate::error::{Error, Result};

const UNET_PREFIX: &str = "lora_unet_";
const TEXT_PREFIX: &str = "lora_te_";
const TRIGGER_KEY: &str = "ss_trigger_word";

#[derive(Default)]
struct Parts {
    down: Option<Array2<f64>>,
    up: Option<Array2<f64>>,
    alpha: Option<f64>,
}

fn to_f64(view: &TensorView<'_>) -> Result<Vec<f64>> {
    let data = view.data();
    let out = match view.dtype() {
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F16 => data
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes(c.try_into().unwrap()).to_f64())
            .collect(),
        Dtype::BF16 => data
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes(c.try_into().unwrap()).to_f64())
            .collect(),
        other => return Err(Error::UnsupportedFormat(format!("tensor dtype {other:?}"))),
    };
    Ok(out)
}

fn to_matrix(name: &str, view: &TensorView<'_>) -> Result<Array2<f64>> {
    let shape = view.shape();
    if shape.len() < 2 || shape[2..].iter().any(|&d| d != 1) {
        return Err(Error::UnsupportedFormat(format!("{name}: shape {shape:?} is not a matrix")));
    }
    Array2::from_shape_vec((shape[0], shape[1]), to_f64(view)?)
        .map_err(|e| Error::UnsupportedFormat(format!("{name}: {e}")))
}

/// Splits `lora_unet_block0_attn_to_k.lora_down.weight` into
/// (text encoder?, layer, part).
fn split_key(name: &str) -> Option<(bool, &str, &str)> {
    let (text, rest) = if let Some(r) = name.strip_prefix(UNET_PREFIX) {
        (false, r)
    } else {
        (true, name.strip_prefix(TEXT_PREFIX)?)
    };
    for part in [".lora_down.weight", ".lora_up.weight", ".alpha"] {
        if let Some(layer) = rest.strip_suffix(part) {
            if !layer.is_empty() {
                return Some((text, layer, part));
            }
        }
    }
    None
}

pub fn load_adapter_bytes(bytes: &[u8], lora_id: LoraId) -> Result<LoraAdapter> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    let tensors = SafeTensors::deserialize(bytes).map_err(|e| Error::UnsupportedFormat(e.to_string()))?;

    let mut layers: BTreeMap<(bool, String), Parts> = BTreeMap::new();
    for (name, view) in tensors.iter() {
        let (text, layer, part) =
            split_key(name).ok_or_else(|| Error::UnsupportedFormat(format!("unrecognized key `{name}`")))?;
        let entry = layers.entry((text, layer.to_string())).or_default();
        match part {
            ".lora_down.weight" => entry.down = Some(to_matrix(name, &view)?),
            ".lora_up.weight" => entry.up = Some(to_matrix(name, &view)?),
            _ => {
                let v = to_f64(&view)?;
                if v.len() != 1 {
                    return Err(Error::UnsupportedFormat(format!("{name}: alpha must be a scalar")));
                }
                entry.alpha = Some(v[0]);
            }
        }
    }

    let trigger = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(TRIGGER_KEY).cloned())
        .unwrap_or_else(|| lora_id.to_string());
    let mut adapter = LoraAdapter::new(lora_id, trigger);
    for ((text, layer), parts) in layers {
        let (Some(down), Some(up)) = (parts.down, parts.up) else {
            return Err(Error::UnsupportedFormat(format!("{layer}: needs both lora_down and lora_up")));
        };
        let alpha = parts.alpha.unwrap_or_else(|| {
            warn!("{layer}: no alpha stored, using alpha = rank");
            down.nrows() as f64
        });
        let delta = LoraLayerDelta::new(layer, down, up, alpha)?;
        adapter = if text {
            adapter.with_text_delta(delta)
        } else {
            adapter.with_delta(delta)
        };
    }
    Ok(adapter)
}

/// Loads an adapter; its id is the file stem.
pub fn load_adapter(path: &Path) -> Result<LoraAdapter> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "lora".to_string());
    load_adapter_bytes(&bytes, LoraId(id))
}

fn f32_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

pub fn adapter_to_bytes(adapter: &LoraAdapter) -> Result<Vec<u8>> {
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (prefix, map) in [(UNET_PREFIX, &adapter.deltas), (TEXT_PREFIX, &adapter.text_encoder_deltas)] {
        for (layer, d) in map {
            let stem = format!("{prefix}{layer}");
            buffers.push((
                format!("{stem}.lora_down.weight"),
                vec![d.rank(), d.d_in()],
                f32_bytes(d.down.iter().copied()),
            ));
            buffers.push((
                format!("{stem}.lora_up.weight"),
                vec![d.d_out(), d.rank()],
                f32_bytes(d.up.iter().copied()),
            ));
            buffers.push((format!("{stem}.alpha"), vec![], f32_bytes(std::iter::once(d.alpha))));
        }
    }
    let views = buffers
        .iter()
        .map(|(name, shape, data)| {
            TensorView::new(Dtype::F32, shape.clone(), data)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::UnsupportedFormat(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([(TRIGGER_KEY.to_string(), adapter.trigger.clone())]);
    safetensors::serialize(views, Some(meta)).map_err(|e| Error::UnsupportedFormat(e.to_string()))
}

pub fn save_adapter(adapter: &LoraAdapter, path: &Path) -> Result<()> {
    let bytes = adapter_to_bytes(adapter)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> LoraAdapter {
        LoraAdapter::new(LoraId::from("cat"), "sks")
            .with_delta(
                LoraLayerDelta::new("block0_attn_to_k", array![[0.5, -1.25, 2.0]], array![[1.0], [0.25]], 4.0).unwrap(),
            )
            .with_text_delta(LoraLayerDelta::new("text_proj", array![[0.5, 0.5]], array![[1.0], [-3.0]], 1.0).unwrap())
    }

    #[test]
    fn roundtrip() {
        let a = sample();
        let back = load_adapter_bytes(&adapter_to_bytes(&a).unwrap(), a.lora_id.clone()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn file_roundtrip_uses_stem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cat.safetensors");
        save_adapter(&sample(), &path).unwrap();
        assert_eq!(load_adapter(&path).unwrap(), sample());
    }

    fn write(tensors: &[(&str, Vec<usize>, Vec<f32>)]) -> Vec<u8> {
        let bufs: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
            .iter()
            .map(|(n, s, v)| (n.to_string(), s.clone(), v.iter().flat_map(|x| x.to_le_bytes()).collect()))
            .collect();
        let views: Vec<_> = bufs
            .iter()
            .map(|(n, s, d)| (n.clone(), TensorView::new(Dtype::F32, s.clone(), d).unwrap()))
            .collect();
        safetensors::serialize(views, None).unwrap()
    }

    #[test]
    fn missing_alpha_defaults_to_rank() {
        let bytes = write(&[
            ("lora_unet_w.lora_down.weight", vec![2, 1], vec![1.0, 2.0]),
            ("lora_unet_w.lora_up.weight", vec![1, 2], vec![3.0, 4.0]),
        ]);
        let a = load_adapter_bytes(&bytes, LoraId::from("x")).unwrap();
        assert_eq!(a.deltas["w"].alpha, 2.0);
        assert_eq!(a.trigger, "x");
    }

    #[test]
    fn conv_shaped_tensors() {
        let bytes = write(&[
            ("lora_unet_conv.lora_down.weight", vec![1, 2, 1, 1], vec![1.0, 2.0]),
            ("lora_unet_conv.lora_up.weight", vec![2, 1, 1, 1], vec![3.0, 4.0]),
        ]);
        let a = load_adapter_bytes(&bytes, LoraId::from("x")).unwrap();
        assert_eq!(a.deltas["conv"].down, array![[1.0, 2.0]]);
    }

    #[test]
    fn unknown_scheme() {
        let bytes = write(&[("base_model.model.q_proj.lora_A.weight", vec![1, 2], vec![1.0, 2.0])]);
        assert!(matches!(
            load_adapter_bytes(&bytes, LoraId::from("x")),
            Err(Error::UnsupportedFormat(_))
        ));
        let half = write(&[("lora_unet_w.lora_down.weight", vec![1, 2], vec![1.0, 2.0])]);
        assert!(matches!(
            load_adapter_bytes(&half, LoraId::from("x")),
            Err(Error::UnsupportedFormat(_))
        ));
        assert!(load_adapter_bytes(b"not a tensor file", LoraId::from("x")).is_err());
    }
}
