//! Optional per-step dumps of attention maps and masks.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{imageops, GrayImage, Luma};
use ndarray::Array2;
use serde::Serialize;

use crate::attention::TokenMaps;
use crate::error::{Error, Result};
use crate::mask::MaskSet;

#[derive(Serialize)]
struct VariantMaps<'a> {
    variant_id: usize,
    tokens: &'a [String],
    /// One row-major `h * w` map per token.
    maps: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct StepRecord<'a> {
    step: usize,
    inter_group_iou: f64,
    variants: Vec<VariantMaps<'a>>,
}

/// One JSON object per sampler step.
pub struct AttnLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl AttnLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write_step(
        &mut self,
        step: usize,
        maps: &BTreeMap<usize, TokenMaps>,
        tokens: &BTreeMap<usize, Vec<String>>,
        iou: f64,
    ) -> Result<()> {
        let variants = maps
            .iter()
            .map(|(vid, m)| VariantMaps {
                variant_id: *vid,
                tokens: tokens.get(vid).map(Vec::as_slice).unwrap_or(&[]),
                maps: m.outer_iter().map(|t| t.iter().copied().collect()).collect(),
            })
            .collect();
        let record = StepRecord {
            step,
            inter_group_iou: iou,
            variants,
        };
        serde_json::to_writer(&mut self.out, &record)?;
        writeln!(self.out).map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

const MASK_SCALE: u32 = 4;

pub fn mask_image(mask: &Array2<bool>) -> GrayImage {
    let (h, w) = mask.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    imageops::resize(
        &img,
        w as u32 * MASK_SCALE,
        h as u32 * MASK_SCALE,
        imageops::FilterType::Nearest,
    )
}

/// Writes `step{NNN}_{lora}.png` for each mask and `step{NNN}_background.png`.
pub struct MaskDump {
    dir: PathBuf,
}

impl MaskDump {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn write_step(&self, step: usize, masks: &MaskSet) -> Result<()> {
        let named = masks
            .masks
            .iter()
            .map(|(id, m)| (id.to_string(), m))
            .chain(std::iter::once(("background".to_string(), &masks.background)));
        for (name, m) in named {
            let path = self.dir.join(format!("step{step:03}_{name}.png"));
            mask_image(m).save(&path)?;
        }
        Ok(())
    }
}
